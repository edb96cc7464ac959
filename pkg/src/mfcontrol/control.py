"""Pointwise Hamiltonian minimization via the first-order condition.

The minimizer solves ``da_f(x, mu, a) . z + da_g(x, mu, a) = 0`` with a
damped Newton iteration, vectorized over a batch of (x, z) pairs sharing one
measure.  Inside the cone ``|z| <= k0 (1 + |x| + ||mu||_1) / 2`` the Newton
Jacobian is uniformly positive definite, which is what makes the warm-started
iteration converge in a couple of steps along smooth trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConeViolationError, ConfigError, NewtonError
from .measure import ParticleMeasure


@dataclass(frozen=True)
class ControlSolveConfig:
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    damping: float = 1.0
    init_strategy: str = "zero"

    def __post_init__(self):
        if self.newton_tol <= 0:
            raise ConfigError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ConfigError("newton_max_iter must be >= 1")
        if not (0 < self.damping <= 1):
            raise ConfigError("damping must lie in (0, 1]")
        if self.init_strategy not in ("zero", "warm_start"):
            raise ConfigError("init_strategy must be 'zero' or 'warm_start'")


@dataclass(frozen=True)
class ConeParams:
    k0: float

    def __post_init__(self):
        if self.k0 <= 0:
            raise ConfigError("k0 must be positive")


@dataclass
class ConeCheckResult:
    inside: np.ndarray
    margin: np.ndarray

    @property
    def all_inside(self) -> bool:
        return bool(np.all(self.inside))

    def __bool__(self):
        return self.all_inside


def cone_check(x, mu: ParticleMeasure, z, cone: ConeParams) -> ConeCheckResult:
    """Membership and margin for |z| <= k0 (1 + |x| + ||mu||_1) / 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    bound = 0.5 * cone.k0 * (1.0 + np.linalg.norm(x, axis=-1) + mu.mean_abs_norm())
    margin = bound - np.linalg.norm(z, axis=-1)
    return ConeCheckResult(inside=margin >= 0.0, margin=margin)


def foc_residual(x, mu, z, alpha, model) -> np.ndarray:
    """First-order-condition residual da_f . z + da_g, shape (..., d_alpha)."""
    daf = np.asarray(model.da_f(x, mu, alpha))
    dag = np.asarray(model.da_g(x, mu, alpha))
    return np.einsum("...ij,...i->...j", daf, np.asarray(z, dtype=float)) + dag


def _newton_matrix(x, mu, z, alpha, model) -> np.ndarray:
    """Newton Jacobian daa_f . z + daa_g, shape (..., d_alpha, d_alpha)."""
    daaf = np.asarray(model.daa_f(x, mu, alpha))
    daag = np.asarray(model.daa_g(x, mu, alpha))
    return np.einsum("...ijk,...i->...jk", daaf, np.asarray(z, dtype=float)) + daag


def _solve_alpha_scalar(x, mu, z, model, cfg, warm):
    """Fast path for scalar controls; inputs pre-broadcast, x/z (..., 1)."""
    zz = z[..., 0]
    alpha = warm.copy() if warm is not None else np.zeros(zz.shape + (1,))

    def res(al):
        daf = np.asarray(model.da_f(x, mu, al))[..., 0, 0]
        dag = np.asarray(model.da_g(x, mu, al))[..., 0]
        return daf * zz + dag

    r = res(alpha)
    ar = np.abs(r)
    for _ in range(cfg.newton_max_iter):
        if ar.max() <= cfg.newton_tol:
            return alpha
        J = (np.asarray(model.daa_f(x, mu, alpha))[..., 0, 0, 0] * zz
             + np.asarray(model.daa_g(x, mu, alpha))[..., 0, 0])
        if J.min() <= 0.0:
            raise ConeViolationError("indefinite Newton matrix: query left the cone")
        step = (r / J)[..., None]
        lam = np.full(ar.shape, cfg.damping)
        for _ in range(30):
            trial = alpha - lam[..., None] * step
            rt = res(trial)
            art = np.abs(rt)
            bad = (art > ar) & (lam > 1e-6)
            if not bad.any():
                break
            lam[bad] *= 0.5
        if (art > ar).any():
            raise NewtonError("Newton step could not reduce the FOC residual",
                              residual=float(ar.max()))
        alpha, r, ar = trial, rt, art
    if ar.max() > cfg.newton_tol:
        raise NewtonError(
            f"Newton did not reach tol {cfg.newton_tol:g} in {cfg.newton_max_iter} iterations",
            residual=float(ar.max()))
    return alpha


def solve_alpha(x, mu: ParticleMeasure, z, model, cfg: ControlSolveConfig = ControlSolveConfig(),
                warm=None, cone: ConeParams = None):
    """Minimize the Hamiltonian integrand over the control at each (x, z).

    Returns the unique stationary control with FOC residual below
    ``cfg.newton_tol``.  An indefinite Newton matrix along the way signals
    that (x, mu, z) left the admissible cone.
    """
    x_in = np.asarray(x, dtype=float)
    single = x_in.ndim == 1
    x = np.atleast_2d(x_in)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if x.shape[:-1] != z.shape[:-1]:
        batch = np.broadcast_shapes(x.shape[:-1], z.shape[:-1])
        x = np.broadcast_to(x, batch + x.shape[-1:])
        z = np.broadcast_to(z, batch + z.shape[-1:])
    else:
        batch = x.shape[:-1]
    if cone is not None:
        chk = cone_check(x, mu, z, cone)
        if not chk.all_inside:
            raise ConeViolationError(
                f"{int(np.sum(~chk.inside))} of {chk.inside.size} query points outside the cone")

    da = model.d_alpha
    if warm is not None:
        alpha0 = np.broadcast_to(np.atleast_2d(np.asarray(warm, dtype=float)), batch + (da,)).copy()
    else:
        alpha0 = None
    if da == 1:
        alpha = _solve_alpha_scalar(x, mu, z, model, cfg, alpha0)
        return alpha[0] if single else alpha

    alpha = alpha0 if alpha0 is not None else np.zeros(batch + (da,))
    res = foc_residual(x, mu, z, alpha, model)
    rnorm = np.linalg.norm(res, axis=-1)
    for _ in range(cfg.newton_max_iter):
        if rnorm.max() <= cfg.newton_tol:
            break
        J = _newton_matrix(x, mu, z, alpha, model)
        # uniqueness lives on the cone where J is positive definite
        try:
            np.linalg.cholesky(J)
        except np.linalg.LinAlgError:
            raise ConeViolationError("indefinite Newton matrix: query left the cone")
        step = np.linalg.solve(J, res[..., None])[..., 0]
        lam = np.full(rnorm.shape, cfg.damping)
        for _ in range(30):
            trial = alpha - lam[..., None] * step
            t_res = foc_residual(x, mu, z, trial, model)
            t_norm = np.linalg.norm(t_res, axis=-1)
            bad = (t_norm > rnorm) & (lam > 1e-6)
            if not np.any(bad):
                break
            lam[bad] *= 0.5
        if np.any(t_norm > rnorm):
            raise NewtonError("Newton step could not reduce the FOC residual",
                              residual=float(np.max(rnorm)))
        alpha, res, rnorm = trial, t_res, t_norm
    else:
        if np.any(rnorm > cfg.newton_tol):
            raise NewtonError(
                f"Newton did not reach tol {cfg.newton_tol:g} in {cfg.newton_max_iter} iterations",
                residual=float(np.max(rnorm)))
    return alpha[0] if single else alpha


def alpha_derivatives(x, mu: ParticleMeasure, z, alpha, model):
    """Closed-form derivatives of the minimizer at a stationary point.

    Returns ``(dx_alpha, dz_alpha, dmu_alpha)`` with shapes
    (..., d_alpha, d_x) for the first two; ``dmu_alpha`` is a function of the
    probe point returning the same shape.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    J = _newton_matrix(x, mu, z, alpha, model)
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise ConeViolationError("singular Newton matrix in alpha_derivatives")

    daxf = np.asarray(model.dax_f(x, mu, alpha))
    daxg = np.asarray(model.dax_g(x, mu, alpha))
    rhs_x = np.einsum("...ijk,...i->...jk", daxf, z) + daxg
    dx_alpha = -np.einsum("...jk,...kl->...jl", Jinv, rhs_x)

    # da_f is (..., d_x, d_alpha); the FOC's z-gradient is its transpose
    daf = np.asarray(model.da_f(x, mu, alpha))
    dz_alpha = -np.einsum("...jk,...ik->...ji", Jinv, daf)

    def dmu_alpha(xt):
        damuf = np.asarray(model.damu_f(x, mu, alpha, xt))
        damug = np.asarray(model.damu_g(x, mu, alpha, xt))
        rhs_mu = np.einsum("...ijk,...i->...jk", damuf, z) + damug
        return -np.einsum("...jk,...kl->...jl", Jinv, rhs_mu)

    return dx_alpha, dz_alpha, dmu_alpha


def hamiltonian(x, mu: ParticleMeasure, z, model, cfg: ControlSolveConfig = ControlSolveConfig(),
                warm=None) -> np.ndarray:
    """h(x, mu, z) = f . z + g evaluated at the minimizing control."""
    alpha = solve_alpha(x, mu, z, model, cfg, warm=warm)
    fv = np.asarray(model.f(x, mu, alpha))
    gv = np.asarray(model.g(x, mu, alpha))
    return np.einsum("...i,...i->...", fv, np.asarray(z, dtype=float)) + gv
