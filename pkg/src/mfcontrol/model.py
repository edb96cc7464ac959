"""Coefficient-function contract: drift f, running cost g, terminal cost k.

Every evaluator is vectorized over leading batch dimensions.  Point arguments
carry an explicit trailing coordinate axis: states ``x`` and measure probes
``xt``/``xh`` are ``(..., d_x)``, controls are ``(..., d_alpha)``; batch
shapes broadcast against each other.  Measure arguments are always a
:class:`~mfcontrol.measure.ParticleMeasure` (fixed, not batched).

Output shapes (``i`` indexes components of the vector-valued drift):

====================  =======================  ==============================
evaluator             shape                    entry
====================  =======================  ==============================
f                     (..., d_x)               f_i
dx_f                  (..., d_x, d_x)          d f_i / d x_j
da_f                  (..., d_x, d_a)          d f_i / d a_j
dmu_f(xt)             (..., d_x, d_x)          d_{xt_j} (delta f_i / delta mu)
dxx_f                 (..., d_x, d_x, d_x)     d2 f_i / d x_j d x_k
dax_f                 (..., d_x, d_a, d_x)     d2 f_i / d a_j d x_k
daa_f                 (..., d_x, d_a, d_a)     d2 f_i / d a_j d a_k
dxmu_f(xt)            (..., d_x, d_x, d_x)     d_{x_j} d_{xt_k} (delta f_i/dmu)
dtmu_f(xt)            (..., d_x, d_x, d_x)     d_{xt_j} d_{xt_k} (delta f_i/dmu)
damu_f(xt)            (..., d_x, d_a, d_x)     d_{a_j} d_{xt_k} (delta f_i/dmu)
dmumu_f(xt, xh)       (..., d_x, d_x, d_x)     d_{xt_j} d_{xh_k} (d2 f_i/dmu2)
g                     (...)                    scalar cost
dx_g / da_g / dmu_g   (..., d_x) / (..., d_a) / (..., d_x)
dxx_g                 (..., d_x, d_x)
dax_g                 (..., d_a, d_x)
daa_g                 (..., d_a, d_a)
dxmu_g / dtmu_g       (..., d_x, d_x)
damu_g                (..., d_a, d_x)
dmumu_g(xt, xh)       (..., d_x, d_x)
k / dx_k / dmu_k      (...) / (..., d_x) / (..., d_x)
dxx_k, dxmu_k,
dtmu_k, dmumu_k       (..., d_x, d_x)
====================  =======================  ==============================

Perturbing atom ``l`` of an N-atom cloud by ``h`` along coordinate ``c``
changes any smooth functional F(mu) by ``(h/N) * d_{xt_c}(dF/dmu)(x_l)``;
the finite-difference checker verifies every measure derivative through this
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .measure import ParticleMeasure, dirac


@dataclass(frozen=True)
class ModelConstants:
    """Structural constants declared by a model (growth/convexity bounds)."""

    lambda_f: float
    Lambda_f: float
    lbar_f: float
    lambda_g: float
    Lambda_g: float
    lbar_g: float
    l_g: float
    lambda_k: float
    Lambda_k: float
    l_k: float
    d_x: int = 1
    d_alpha: int = 1

    def __post_init__(self):
        for name in ("lambda_f", "lambda_g", "lambda_k"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        for name in ("Lambda_f", "Lambda_g", "Lambda_k"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        for name in ("lbar_f", "lbar_g", "l_g", "l_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.l_g > 0.5 * self.lambda_g + 1e-15:
            raise ConfigError("need l_g <= lambda_g / 2")
        if self.l_k > 0.5 * self.lambda_k + 1e-15:
            raise ConfigError("need l_k <= lambda_k / 2")
        # Lambda and lambda bound the same quadratic forms:
        # |da_f^T xi|^2 >= lambda_f with |da_f| <= Lambda_f, so Lambda_f^2 >= lambda_f.
        if self.Lambda_f ** 2 < self.lambda_f - 1e-15:
            raise ConfigError("need Lambda_f^2 >= lambda_f")
        if self.Lambda_g < self.lambda_g - 1e-15:
            raise ConfigError("need Lambda_g >= lambda_g")
        if self.Lambda_k < self.lambda_k - 1e-15:
            raise ConfigError("need Lambda_k >= lambda_k")
        if self.d_x < 1 or self.d_alpha < 1:
            raise ConfigError("dimensions must be positive")


@dataclass
class ModelSpec:
    """Bundle of coefficient evaluators, their derivatives, and constants.

    Evaluators are pure and re-entrant; nothing is mutated after
    construction, so instances are safe to share across workers.
    """

    constants: ModelConstants
    f: Callable
    g: Callable
    k: Callable
    dx_f: Callable
    da_f: Callable
    dmu_f: Callable
    dx_g: Callable
    da_g: Callable
    dmu_g: Callable
    dx_k: Callable
    dmu_k: Callable
    dxx_f: Callable
    dax_f: Callable
    daa_f: Callable
    dxmu_f: Callable
    dtmu_f: Callable
    damu_f: Callable
    dmumu_f: Callable
    dxx_g: Callable
    dax_g: Callable
    daa_g: Callable
    dxmu_g: Callable
    dtmu_g: Callable
    damu_g: Callable
    dmumu_g: Callable
    dxx_k: Callable
    dxmu_k: Callable
    dtmu_k: Callable
    dmumu_k: Callable
    h1_holds: bool = False
    h2_holds: bool = False
    name: str = "custom"
    metadata: dict = field(default_factory=dict)

    @property
    def d_x(self) -> int:
        return self.constants.d_x

    @property
    def d_alpha(self) -> int:
        return self.constants.d_alpha

    def anchor_values(self) -> dict:
        """Absolute coefficient values at the origin probe (0, delta_0, 0).

        These anchor the growth constants L_f, L_g, L_k of the ledger; under
        hypothesis (h1) they all vanish.
        """
        x0 = np.zeros(self.d_x)
        a0 = np.zeros(self.d_alpha)
        mu0 = dirac(0.0, self.d_x)
        xt0 = np.zeros(self.d_x)
        return {
            "f0": float(np.linalg.norm(self.f(x0, mu0, a0))),
            "dxg0": float(np.linalg.norm(self.dx_g(x0, mu0, a0))),
            "dag0": float(np.linalg.norm(self.da_g(x0, mu0, a0))),
            "dmug0": float(np.linalg.norm(self.dmu_g(x0, mu0, a0, xt0))),
            "dxk0": float(np.linalg.norm(self.dx_k(x0, mu0))),
            "dmuk0": float(np.linalg.norm(self.dmu_k(x0, mu0, xt0))),
        }

    def h1_residuals(self) -> np.ndarray:
        """The seven origin evaluations that hypothesis (h1) requires to vanish."""
        from .control import ControlSolveConfig, solve_alpha

        vals = self.anchor_values()
        alpha0 = solve_alpha(
            np.zeros(self.d_x), dirac(0.0, self.d_x), np.zeros(self.d_x), self, ControlSolveConfig()
        )
        seven = [vals["f0"], vals["dxg0"], vals["dag0"], vals["dmug0"],
                 vals["dxk0"], vals["dmuk0"], float(np.linalg.norm(alpha0))]
        return np.asarray(seven)


# ---------------------------------------------------------------------------
# Builtin linear-quadratic model (oracle workhorse)
# ---------------------------------------------------------------------------


def _bshape(*scalars):
    return np.broadcast_shapes(*(np.shape(s) for s in scalars))


def _cfull(shape, value, extra):
    return np.full(shape + extra, float(value))


def builtin_lq(a: float, b: float, q: float, r: float, qT: float, mf_weight: float) -> ModelSpec:
    """Scalar linear-quadratic model.

    Dynamics ``f = a x + b alpha + mf_weight * mean(mu)``, running cost
    ``g = r alpha^2 / 2 + q x^2 / 2``, terminal cost ``k = qT x^2 / 2``.
    Closed-form Riccati solutions make it the oracle for most tests.
    """
    if r <= 0:
        raise ConfigError("builtin_lq requires r > 0")
    if q < 0 or qT < 0:
        raise ConfigError("builtin_lq requires q >= 0 and qT >= 0")
    if b == 0:
        raise ConfigError("builtin_lq requires b != 0 (control must act on the state)")
    if qT == 0:
        raise ConfigError("builtin_lq requires qT > 0 (terminal convexity constant)")
    a, b, q, r, qT, w = map(float, (a, b, q, r, qT, mf_weight))

    lambda_g = min(r, q) if q > 0 else r
    constants = ModelConstants(
        lambda_f=b * b,
        Lambda_f=max(abs(a), abs(b), abs(w), abs(b)),
        lbar_f=0.0,
        lambda_g=lambda_g,
        Lambda_g=max(q, r),
        lbar_g=0.0,
        l_g=0.0,
        lambda_k=qT,
        Lambda_k=qT,
        l_k=0.0,
    )

    def sx(x):
        return np.asarray(x, dtype=float)[..., 0]

    def f(x, mu, alpha):
        v = a * sx(x) + b * sx(alpha) + w * float(mu.mean()[0])
        return v[..., None]

    def g(x, mu, alpha):
        return 0.5 * r * sx(alpha) ** 2 + 0.5 * q * sx(x) ** 2

    def k(x, mu):
        return 0.5 * qT * sx(x) ** 2

    def dx_f(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), a, (1, 1))

    def da_f(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), b, (1, 1))

    def dmu_f(x, mu, alpha, xt):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt)), w, (1, 1))

    def dx_g(x, mu, alpha):
        return (q * sx(x) + 0.0 * sx(alpha))[..., None]

    def da_g(x, mu, alpha):
        return (r * sx(alpha) + 0.0 * sx(x))[..., None]

    def dmu_g(x, mu, alpha, xt):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt)), 0.0, (1,))

    def dx_k(x, mu):
        return (qT * sx(x))[..., None]

    def dmu_k(x, mu, xt):
        return _cfull(_bshape(sx(x), sx(xt)), 0.0, (1,))

    def _zero3_f(x, mu, alpha, *probes):
        return _cfull(_bshape(sx(x), sx(alpha), *(sx(p) for p in probes)), 0.0, (1, 1, 1))

    def dxx_g(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), q, (1, 1))

    def daa_g(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), r, (1, 1))

    def _zero2_g(x, mu, alpha, *probes):
        return _cfull(_bshape(sx(x), sx(alpha), *(sx(p) for p in probes)), 0.0, (1, 1))

    def dxx_k(x, mu):
        return _cfull(_bshape(sx(x)), qT, (1, 1))

    def _zero2_k(x, mu, *probes):
        return _cfull(_bshape(sx(x), *(sx(p) for p in probes)), 0.0, (1, 1))

    return ModelSpec(
        constants=constants,
        f=f, g=g, k=k,
        dx_f=dx_f, da_f=da_f, dmu_f=dmu_f,
        dx_g=dx_g, da_g=da_g, dmu_g=dmu_g,
        dx_k=dx_k, dmu_k=dmu_k,
        dxx_f=_zero3_f, dax_f=_zero3_f, daa_f=_zero3_f,
        dxmu_f=_zero3_f, dtmu_f=_zero3_f, damu_f=_zero3_f,
        dmumu_f=lambda x, mu, alpha, xt, xh: _zero3_f(x, mu, alpha, xt, xh),
        dxx_g=dxx_g, dax_g=_zero2_g, daa_g=daa_g,
        dxmu_g=_zero2_g, dtmu_g=_zero2_g, damu_g=_zero2_g,
        dmumu_g=lambda x, mu, alpha, xt, xh: _zero2_g(x, mu, alpha, xt, xh),
        dxx_k=dxx_k, dxmu_k=_zero2_k, dtmu_k=_zero2_k,
        dmumu_k=lambda x, mu, xt, xh: _zero2_k(x, mu, xt, xh),
        h1_holds=True,
        h2_holds=True,
        name="lq",
        metadata={"params": {"a": a, "b": b, "q": q, "r": r, "qT": qT, "mf_weight": w}},
    )


# ---------------------------------------------------------------------------
# Builtin non-linear-quadratic model
# ---------------------------------------------------------------------------


def bump(y):
    """C^2 even function with bump(y) >= |y|; linear |y| outside [-1, 1]."""
    y = np.asarray(y, dtype=float)
    inner = -0.125 * y ** 4 + 0.75 * y ** 2 + 0.375
    return np.where(np.abs(y) >= 1.0, np.abs(y), inner)


def bump_prime(y):
    y = np.asarray(y, dtype=float)
    inner = -0.5 * y ** 3 + 1.5 * y
    return np.where(y >= 1.0, 1.0, np.where(y <= -1.0, -1.0, inner))


def bump_second(y):
    y = np.asarray(y, dtype=float)
    return np.where(np.abs(y) >= 1.0, 0.0, -1.5 * y ** 2 + 1.5)


_C1_CACHE: dict = {}


def _second_derivative_envelope():
    """Certified-by-sampling coefficient of the second-derivative growth bound.

    The drift's second derivatives all share the gaussian factor
    exp(-x^2 - a^2 - I^2) with polynomial prefactors, where I is the bump
    integral of the measure (I >= ||mu||_1, so ||mu||_1 = I is the worst
    case for the weight 1 + |x| + ||mu||_1).  The supremum is estimated on a
    dense grid over [-4, 4]^2 x [0, 4]; the envelope is unimodal and decays
    fast, so the grid max is a tight stand-in for the true constant.
    """
    if "c1" in _C1_CACHE:
        return _C1_CACHE["c1"]
    xs = np.linspace(-4.0, 4.0, 321)
    als = np.linspace(-4.0, 4.0, 321)
    Is = np.linspace(0.0, 4.0, 161)
    x = xs[:, None, None]
    al = als[None, :, None]
    I = Is[None, None, :]
    e = np.exp(-x ** 2 - al ** 2 - I ** 2)
    # per-unit-eps1 magnitudes; |bump'| <= 1, |bump''| <= 3/2 over probes
    terms = np.stack([
        np.abs(2.0 * x * (3.0 - 2.0 * x ** 2)) * e,          # dxx
        2.0 * np.abs(1.0 - 2.0 * x ** 2) * I * e,            # dxmu
        2.0 * np.abs(x) * np.abs(1.0 - 2.0 * I ** 2) * e,    # dmumu
        3.0 * np.abs(x) * I * e,                             # dtmu (|bump''|<=3/2)
        2.0 * np.abs(al) * np.abs(1.0 - 2.0 * x ** 2) * e,   # dax
        4.0 * np.abs(x * al) * I * e,                        # damu
        2.0 * np.abs(1.0 - 2.0 * al ** 2) * np.abs(x) * e,   # daa
    ])
    weight = 1.0 + np.abs(x) + I
    c1 = float((terms.max(axis=0) * weight).max())
    _C1_CACHE["c1"] = c1
    return c1


def builtin_nonlq(eps1: float, eps2: float, eps3: float, eps4: float) -> ModelSpec:
    """Scalar non-linear-quadratic model with non-separable Hamiltonian.

    Drift ``f = x + alpha + mean(mu) + eps1 * x * exp(-x^2 - alpha^2 - I^2)``
    with ``I = integral of the bump function against mu``; costs
    ``g = alpha^2/2 + x^2/2 - eps2 mean^2 + eps3 alpha mean`` and
    ``k = x^2/2 - eps4 x mean``.

    The (h2) smallness of the drift's second derivatives is checked, not
    assumed: ``h2_holds`` reflects whether ``lbar_f = C1 * eps1`` clears the
    computed ledger bound.
    """
    if not (0 < eps1 < 1):
        raise ConfigError("eps1 must lie in (0, 1)")
    if not (0 < eps2 <= 0.25):
        raise ConfigError("eps2 must lie in (0, 1/4]")
    if not (0 < eps3 <= 0.125):
        raise ConfigError("eps3 must lie in (0, 1/8]")
    if not (0 < eps4 <= 0.5):
        raise ConfigError("eps4 must lie in (0, 1/2]")
    eps1, eps2, eps3, eps4 = map(float, (eps1, eps2, eps3, eps4))

    c1 = _second_derivative_envelope()
    constants = ModelConstants(
        lambda_f=0.25,
        Lambda_f=3.0,
        lbar_f=c1 * eps1,
        lambda_g=1.0,
        Lambda_g=1.5,
        lbar_g=eps3,
        l_g=2.0 * eps2,
        lambda_k=1.0,
        Lambda_k=1.5,
        l_k=eps4,
    )

    def sx(x):
        return np.asarray(x, dtype=float)[..., 0]

    def mu_mean(mu):
        return float(mu.mean()[0])

    def mu_bump(mu):
        return mu.cached_stat("bump_integral", lambda a: float(bump(a[:, 0]).mean()))

    def efac(x, alpha, I):
        return np.exp(-x ** 2 - alpha ** 2 - I * I)

    def f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        I = mu_bump(mu)
        v = X + A + mu_mean(mu) + eps1 * X * efac(X, A, I)
        return v[..., None]

    def g(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        mbar = mu_mean(mu)
        return 0.5 * A ** 2 + 0.5 * X ** 2 - eps2 * mbar ** 2 + eps3 * A * mbar

    def k(x, mu):
        X = sx(x)
        return 0.5 * X ** 2 - eps4 * X * mu_mean(mu)

    def dx_f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        e = efac(X, A, mu_bump(mu))
        return (1.0 + eps1 * (1.0 - 2.0 * X ** 2) * e)[..., None, None]

    def da_f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        e = efac(X, A, mu_bump(mu))
        return (1.0 - 2.0 * eps1 * A * X * e)[..., None, None]

    def dmu_f(x, mu, alpha, xt):
        X, A, T = sx(x), sx(alpha), sx(xt)
        I = mu_bump(mu)
        e = efac(X, A, I)
        return (1.0 - 2.0 * eps1 * bump_prime(T) * X * I * e)[..., None, None]

    def dxx_f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        e = efac(X, A, mu_bump(mu))
        return (-2.0 * X * (3.0 - 2.0 * X ** 2) * eps1 * e)[..., None, None, None]

    def dax_f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        e = efac(X, A, mu_bump(mu))
        return (-2.0 * eps1 * A * (1.0 - 2.0 * X ** 2) * e)[..., None, None, None]

    def daa_f(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        e = efac(X, A, mu_bump(mu))
        return (-2.0 * eps1 * (1.0 - 2.0 * A ** 2) * X * e)[..., None, None, None]

    def dxmu_f(x, mu, alpha, xt):
        X, A, T = sx(x), sx(alpha), sx(xt)
        I = mu_bump(mu)
        e = efac(X, A, I)
        return (-2.0 * eps1 * bump_prime(T) * (1.0 - 2.0 * X ** 2) * I * e)[..., None, None, None]

    def dtmu_f(x, mu, alpha, xt):
        X, A, T = sx(x), sx(alpha), sx(xt)
        I = mu_bump(mu)
        e = efac(X, A, I)
        return (-2.0 * eps1 * bump_second(T) * X * I * e)[..., None, None, None]

    def damu_f(x, mu, alpha, xt):
        X, A, T = sx(x), sx(alpha), sx(xt)
        I = mu_bump(mu)
        e = efac(X, A, I)
        return (4.0 * eps1 * bump_prime(T) * X * A * I * e)[..., None, None, None]

    def dmumu_f(x, mu, alpha, xt, xh):
        X, A, T, H = sx(x), sx(alpha), sx(xt), sx(xh)
        I = mu_bump(mu)
        e = efac(X, A, I)
        v = -2.0 * eps1 * bump_prime(T) * bump_prime(H) * X * (1.0 - 2.0 * I * I) * e
        return v[..., None, None, None]

    def dx_g(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        return (X + 0.0 * A)[..., None]

    def da_g(x, mu, alpha):
        X, A = sx(x), sx(alpha)
        return (A + eps3 * mu_mean(mu) + 0.0 * X)[..., None]

    def dmu_g(x, mu, alpha, xt):
        X, A, T = sx(x), sx(alpha), sx(xt)
        v = -2.0 * eps2 * mu_mean(mu) + eps3 * A + 0.0 * X + 0.0 * T
        return v[..., None]

    def dxx_g(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), 1.0, (1, 1))

    def daa_g(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), 1.0, (1, 1))

    def dax_g(x, mu, alpha):
        return _cfull(_bshape(sx(x), sx(alpha)), 0.0, (1, 1))

    def dxmu_g(x, mu, alpha, xt):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt)), 0.0, (1, 1))

    def dtmu_g(x, mu, alpha, xt):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt)), 0.0, (1, 1))

    def damu_g(x, mu, alpha, xt):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt)), eps3, (1, 1))

    def dmumu_g(x, mu, alpha, xt, xh):
        return _cfull(_bshape(sx(x), sx(alpha), sx(xt), sx(xh)), -2.0 * eps2, (1, 1))

    def dx_k(x, mu):
        return (sx(x) - eps4 * mu_mean(mu))[..., None]

    def dmu_k(x, mu, xt):
        X, T = sx(x), sx(xt)
        return (-eps4 * X + 0.0 * T)[..., None]

    def dxx_k(x, mu):
        return _cfull(_bshape(sx(x)), 1.0, (1, 1))

    def dxmu_k(x, mu, xt):
        return _cfull(_bshape(sx(x), sx(xt)), -eps4, (1, 1))

    def dtmu_k(x, mu, xt):
        return _cfull(_bshape(sx(x), sx(xt)), 0.0, (1, 1))

    def dmumu_k(x, mu, xt, xh):
        return _cfull(_bshape(sx(x), sx(xt), sx(xh)), 0.0, (1, 1))

    from .analysis import compute_constants

    ledger = compute_constants(constants)
    h2 = (8.0 * eps3 <= 1.0 + 1e-15) and (c1 * eps1 <= 1.0 / (40.0 * max(ledger.Lbar_k, ledger.Lstar_0)))

    return ModelSpec(
        constants=constants,
        f=f, g=g, k=k,
        dx_f=dx_f, da_f=da_f, dmu_f=dmu_f,
        dx_g=dx_g, da_g=da_g, dmu_g=dmu_g,
        dx_k=dx_k, dmu_k=dmu_k,
        dxx_f=dxx_f, dax_f=dax_f, daa_f=daa_f,
        dxmu_f=dxmu_f, dtmu_f=dtmu_f, damu_f=damu_f, dmumu_f=dmumu_f,
        dxx_g=dxx_g, dax_g=dax_g, daa_g=daa_g,
        dxmu_g=dxmu_g, dtmu_g=dtmu_g, damu_g=damu_g, dmumu_g=dmumu_g,
        dxx_k=dxx_k, dxmu_k=dxmu_k, dtmu_k=dtmu_k, dmumu_k=dmumu_k,
        h1_holds=True,
        h2_holds=h2,
        name="nonlq",
        metadata={
            "params": {"eps1": eps1, "eps2": eps2, "eps3": eps3, "eps4": eps4},
            "c1": c1,
            "Lstar_0": ledger.Lstar_0,
        },
    )


# ---------------------------------------------------------------------------
# Finite-difference derivative checker
# ---------------------------------------------------------------------------


@dataclass
class DerivCheckReport:
    """Max relative error per declared derivative over the supplied probes."""

    errors: dict
    h: float
    threshold: float = 1e-4

    def failures(self, threshold: Optional[float] = None):
        thr = self.threshold if threshold is None else threshold
        return sorted(name for name, e in self.errors.items() if not (e <= thr))

    @property
    def passed(self) -> bool:
        return not self.failures()

    def __repr__(self):
        worst = max(self.errors.values()) if self.errors else 0.0
        return f"DerivCheckReport(worst={worst:.3e}, failures={self.failures()})"


def _rel(err, ref):
    scale = max(1.0, float(np.max(np.abs(ref))) if np.size(ref) else 0.0)
    return float(np.max(np.abs(err))) / scale if np.size(err) else 0.0


def finite_diff_check_derivatives(model: ModelSpec, probes, h: float = 1e-6) -> DerivCheckReport:
    """Compare every declared derivative against central finite differences.

    ``probes`` is a sequence of tuples ``(x, mu, alpha, xt)``.  Direct
    arguments are differenced coordinate-wise; measure derivatives are
    verified through single-atom perturbations of the cloud.
    """
    if h <= 0:
        raise ConfigError("h must be positive")
    dx, da = model.d_x, model.d_alpha
    errs: dict = {}

    def upd(name, err, ref):
        errs[name] = max(errs.get(name, 0.0), _rel(err, ref))

    for probe in probes:
        x, mu, alpha, xt = probe
        x = np.asarray(x, dtype=float).reshape(dx)
        alpha = np.asarray(alpha, dtype=float).reshape(da)
        xt = np.asarray(xt, dtype=float).reshape(dx)
        if not isinstance(mu, ParticleMeasure):
            mu = ParticleMeasure(mu)
        N = mu.n_atoms
        ex = np.eye(dx) * h
        ea = np.eye(da) * h

        def fd_x(fn, *extra):
            cols = [(np.asarray(fn(x + ex[j], mu, *extra)) - np.asarray(fn(x - ex[j], mu, *extra))) / (2 * h)
                    for j in range(dx)]
            return np.stack(cols, axis=-1)

        def fd_a(fn, *pre, post=()):
            cols = [(np.asarray(fn(*pre, alpha + ea[j], *post)) - np.asarray(fn(*pre, alpha - ea[j], *post))) / (2 * h)
                    for j in range(da)]
            return np.stack(cols, axis=-1)

        def fd_probe(fn, *args):
            cols = [(np.asarray(fn(*args, xt + ex[j])) - np.asarray(fn(*args, xt - ex[j]))) / (2 * h)
                    for j in range(dx)]
            return np.stack(cols, axis=-1)

        def fd_atom(fn, atom_idx, *args):
            cols = []
            for c in range(dx):
                mp = mu.perturb_atom(atom_idx, ex[c])
                mm = mu.perturb_atom(atom_idx, -ex[c])
                cols.append((np.asarray(fn(x, mp, *args)) - np.asarray(fn(x, mm, *args))) / (2 * h))
            return np.stack(cols, axis=-1)

        # -- first derivatives in direct arguments ------------------------
        an = model.dx_f(x, mu, alpha)
        upd("dx_f", fd_x(model.f, alpha) - an, an)
        an = model.da_f(x, mu, alpha)
        upd("da_f", fd_a(model.f, x, mu) - an, an)
        an = model.dx_g(x, mu, alpha)
        upd("dx_g", fd_x(model.g, alpha) - an, an)
        an = model.da_g(x, mu, alpha)
        upd("da_g", fd_a(model.g, x, mu) - an, an)
        an = model.dx_k(x, mu)
        upd("dx_k", fd_x(model.k) - an, an)

        # -- second derivatives in direct arguments -----------------------
        an = model.dxx_f(x, mu, alpha)
        upd("dxx_f", fd_x(lambda xx, m, al: model.dx_f(xx, m, al), alpha) - an, an)
        # dax_f[i, j, k] = d(da_f[i, j])/dx_k: FD of da_f in x stacks k last
        fd = fd_x(lambda xx, m, al: model.da_f(xx, m, al), alpha)
        an = model.dax_f(x, mu, alpha)
        upd("dax_f", fd - an, an)
        fd = fd_a(model.da_f, x, mu)
        an = model.daa_f(x, mu, alpha)
        upd("daa_f", fd - an, an)
        fd = fd_x(lambda xx, m, al: model.dx_g(xx, m, al), alpha)
        an = model.dxx_g(x, mu, alpha)
        upd("dxx_g", fd - an, an)
        fd = fd_x(lambda xx, m, al: model.da_g(xx, m, al), alpha)
        an = model.dax_g(x, mu, alpha)
        upd("dax_g", fd - an, an)
        fd = fd_a(model.da_g, x, mu)
        an = model.daa_g(x, mu, alpha)
        upd("daa_g", fd - an, an)
        fd = fd_x(lambda xx, m: model.dx_k(xx, m))
        an = model.dxx_k(x, mu)
        upd("dxx_k", fd - an, an)

        # -- first measure derivatives (atom perturbation identity) -------
        for name, fn, dfn, args in (
            ("dmu_f", lambda xx, m, al: model.f(xx, m, al), model.dmu_f, (alpha,)),
            ("dmu_g", lambda xx, m, al: model.g(xx, m, al), model.dmu_g, (alpha,)),
            ("dmu_k", lambda xx, m: model.k(xx, m), model.dmu_k, ()),
        ):
            for l in range(min(N, 3)):
                fd = fd_atom(fn, l, *args)
                an = np.asarray(dfn(x, mu, *args, mu.atoms[l])) / N
                upd(name, fd - an, an)

        # -- second measure derivatives ------------------------------------
        # probe-slot second derivative: direct FD in xt
        for name, dfn, args in (
            ("dtmu_f", model.dmu_f, (alpha,)),
            ("dtmu_g", model.dmu_g, (alpha,)),
            ("dtmu_k", model.dmu_k, ()),
        ):
            fd = fd_probe(lambda xx, m, *rest: dfn(xx, m, *rest), x, mu, *args)
            an = np.asarray(getattr(model, name)(x, mu, *args, xt))
            upd(name, fd - an, an)
        # state-slot derivative of the measure derivative
        fd = fd_x(lambda xx, m, al: model.dmu_f(xx, m, al, xt), alpha)
        an = model.dxmu_f(x, mu, alpha, xt)
        upd("dxmu_f", fd - an, an)
        fd = fd_x(lambda xx, m, al: model.dmu_g(xx, m, al, xt), alpha)
        an = model.dxmu_g(x, mu, alpha, xt)
        upd("dxmu_g", fd - an, an)
        fd = fd_x(lambda xx, m: model.dmu_k(xx, m, xt))
        an = model.dxmu_k(x, mu, xt)
        upd("dxmu_k", fd - an, an)
        # control-slot derivative of the measure derivative
        fd = fd_a(model.dmu_f, x, mu, post=(xt,))
        an = model.damu_f(x, mu, alpha, xt)
        upd("damu_f", fd - an, an)
        fd = fd_a(model.dmu_g, x, mu, post=(xt,))
        an = model.damu_g(x, mu, alpha, xt)
        upd("damu_g", fd - an, an)
        # second measure derivative: atom perturbation of the first one
        for name, dfn, d2fn, args in (
            ("dmumu_f", model.dmu_f, model.dmumu_f, (alpha,)),
            ("dmumu_g", model.dmu_g, model.dmumu_g, (alpha,)),
            ("dmumu_k", model.dmu_k, model.dmumu_k, ()),
        ):
            for l in range(min(N, 2)):
                fd = fd_atom(lambda xx, m, *rest: dfn(xx, m, *rest), l, *args, xt)
                an = np.asarray(d2fn(x, mu, *args, xt, mu.atoms[l])) / N
                upd(name, fd - an, an)

    return DerivCheckReport(errors=errs, h=h)
