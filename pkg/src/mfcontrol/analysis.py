"""Constant ledger, assumption checker, value function, and identity checks.

Every formula in :func:`compute_constants` is evaluated exactly as printed in
the source estimates; the two auxiliary Hamiltonian bounds enter through
their smallness-implied substitutions ``Lambda_h = Lambda_g + lambda_g/20``
and ``lbar_h = lambda_g/5``, which is also how the printed max-formulas
already absorb them (this breaks the apparent circularity between the cone
constant and the slope bound).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .measure import ParticleMeasure, dirac, w1_distance
from .model import ModelConstants, ModelSpec


@dataclass(frozen=True)
class AnchorValues:
    """Coefficient magnitudes at the origin probe; all zero under (h1)."""

    f0: float = 0.0
    dxg0: float = 0.0
    dag0: float = 0.0
    dmug0: float = 0.0
    dxk0: float = 0.0
    dmuk0: float = 0.0
    alpha0: float = 0.0


@dataclass(frozen=True)
class ConstantsReport:
    """Every derived constant of the ledger plus the admissible interval lengths."""

    model_constants: ModelConstants
    anchors: AnchorValues
    lambda_z: float
    lambda_x: float
    eps_small_1: float
    eps_small_2: float
    lambdabar_k: float
    lambdabar_z: float
    lambdabar_x: float
    Lambda_h: float
    lbar_h: float
    Lstar_1: float
    Lstar_2: float
    Lstar_3: float
    Lstar_4: float
    Lstar_5: float
    Lstar_6: float
    Lstar_0: float
    Lbar_k: float
    k0: float
    L_f: float
    L_g: float
    L_k: float
    L_alpha: float
    Lbar_p: float
    L_B: float
    Lbar_B: float
    eps3: float
    eps4: float
    eps1: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_constants"] = asdict(self.model_constants)
        d["anchors"] = asdict(self.anchors)
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if isinstance(v, float)]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v:.12g}" for k, v in rows]
        return "\n".join(lines)


def interval_lengths(mc: ModelConstants, anchors: AnchorValues, Lbar_p: float,
                     L_alpha: float, L_f: float, L_g: float) -> tuple:
    """The three admissible sub-interval lengths, largest to smallest.

    ``Lbar_p`` doubles as the terminal-slope bound L_p; each epsilon is
    strictly decreasing in it.
    """
    L_p = Lbar_p
    Lbar_B = L_f * (1.0 + L_alpha + 2.0 * Lbar_p * L_alpha)
    eps3 = min(
        1.0 / (6.0 * Lbar_B),
        Lbar_p / (50.0 * (2.0 * Lbar_p * mc.Lambda_f + L_g * (1.0 + L_alpha + 2.0 * Lbar_p * L_alpha))),
    )
    eps4 = min(
        eps3,
        7.0 * L_p / (73.0 * (
            3.0 * (2.0 * Lbar_p * mc.lbar_f + mc.Lambda_g)
            + 3.0 * (2.0 * Lbar_p * mc.lbar_f + mc.lbar_g) * L_alpha * (1.0 + 2.0 * L_p)
            + 6.0 * mc.Lambda_f * L_p
        )),
    )
    gmax = 2.0 * Lbar_p * mc.lbar_f + max(mc.Lambda_g, mc.lbar_g)
    eps1 = min(
        eps4,
        1.0 / (2.0 * (8.0 * L_p * L_f * L_alpha + 5.0 * (mc.Lambda_f + gmax * L_alpha))),
        1.0 / (2.0 * math.sqrt(L_f * L_alpha)
               * math.sqrt(34.0 * L_p * mc.Lambda_f + (34.0 * L_p * L_alpha + 21.0 + 17.0 * L_alpha) * gmax)),
    )
    return eps3, eps4, eps1


def compute_constants(mc: ModelConstants, anchors: Optional[AnchorValues] = None) -> ConstantsReport:
    """Evaluate the whole constant chain from the declared model constants.

    Anchor values default to the origin-stationarity zeros; models without
    that property must supply them for the growth constants to be valid.
    """
    if anchors is None:
        anchors = AnchorValues()
    lf, Lf = mc.lambda_f, mc.Lambda_f
    lg, Lg = mc.lambda_g, mc.Lambda_g
    lk, Lk = mc.lambda_k, mc.Lambda_k

    lambda_z = lf ** 2 / (Lg + lg / 20.0)
    lambda_x = (17.0 / 20.0) * lg
    eps_small_1 = min(lk / 4.0, lambda_z / 2.0, lg / 40.0)
    eps_small_2 = min(lk / 4.0, lambda_z / 4.0, lg / 5.0)
    lambdabar_k = lk / 4.0
    lambdabar_z = lambda_z / 2.0
    lambdabar_x = lg / 40.0
    Lambda_h = Lg + lg / 20.0
    lbar_h = lg / 5.0

    Lstar_1 = max(
        4.0 * Lk ** 2 / lk,
        (2.0 * Lambda_h + lg / 20.0) / lambda_z,
        (2.5 * Lf + 2.0 * Lambda_h + lg / 20.0) / lambda_x,
    )
    Lstar_2 = max(
        39.0 * Lk ** 2 / lambdabar_k,
        (5.0 * Lg + lg / 4.0) / lambdabar_x,
        (5.0 * Lf + 7.0 * Lg + (13.0 / 20.0) * lg) / lambdabar_z,
    )
    Lstar_3 = max(
        (12.0 + Lstar_2 / eps_small_1) * Lk ** 2 / lk,
        (2.0 * Lg + lg / 5.0
         + (Lstar_2 / (4.0 * eps_small_1)) * ((25.0 / 16.0) * Lf ** 2 + (2.0 * Lg + lg / 5.0) ** 2)) / lambda_x,
    )
    Lstar_4 = max(
        Lk ** 2 / (eps_small_1 * lk),
        (1.0 / (4.0 * eps_small_1)) * ((25.0 / 16.0) * Lf ** 2 + (2.0 * Lg + lg / 5.0) ** 2) / lambda_x,
    )
    Lstar_5 = max(
        (9.0 / (4.0 * eps_small_2)) * Lk ** 2 / lambdabar_k,
        (25.0 / (64.0 * eps_small_2 * lambdabar_z)) * Lf ** 2,
        (1.0 / (4.0 * eps_small_2 * lambdabar_x)) * ((25.0 / 16.0) * Lf ** 2 + 9.0 * (lg / 10.0 + Lg) ** 2),
    )
    Lstar_6 = max(
        27.0 * Lk ** 2 / lambdabar_k,
        (Lg + lg / 10.0) / lambdabar_x,
        (Lg + lg / 10.0) / lambdabar_z,
        12.0 * Lk ** 2 / lk,
        (2.0 * Lg + lg / 5.0) / lambda_x,
        6.0 * Lk ** 2 / lambdabar_k,
        (2.0 * Lg + (3.0 / 20.0) * lg) / lambdabar_x,
        ((15.0 / 4.0) * Lf + 7.0 * Lg + (13.0 / 20.0) * lg) / lambdabar_z,
    )
    Lstar_0 = mc.d_x * max(
        Lstar_1,
        math.sqrt((Lstar_4 * (2.0 + Lstar_5) + 1.0) * Lstar_1 * Lstar_6),
    )
    Lbar_k = 3.0 * Lk
    k0 = 4.0 * max(Lbar_k, Lstar_0)

    L_f = max(Lf, anchors.f0)
    L_g = max(anchors.dmug0, anchors.dxg0, anchors.dag0, Lg, mc.lbar_g)
    L_k = max(anchors.dmuk0, anchors.dxk0, Lk)
    L_alpha = max(
        20.0 * Lf / (19.0 * lg),
        20.0 * (mc.lbar_g + 0.5 * k0 * mc.lbar_f) / (19.0 * lg),
        anchors.alpha0,
    )
    Lbar_p = max(Lbar_k, Lstar_0)
    L_B = L_f * (1.0 + L_alpha + 2.0 * Lbar_p * L_alpha)
    Lbar_B = L_f * (1.0 + L_alpha + 2.0 * Lbar_p * L_alpha)

    eps3, eps4, eps1 = interval_lengths(mc, anchors, Lbar_p, L_alpha, L_f, L_g)
    if min(eps3, eps4, eps1) <= 0:
        raise ConfigError("constants inconsistency: nonpositive admissible interval length")

    return ConstantsReport(
        model_constants=mc, anchors=anchors,
        lambda_z=lambda_z, lambda_x=lambda_x,
        eps_small_1=eps_small_1, eps_small_2=eps_small_2,
        lambdabar_k=lambdabar_k, lambdabar_z=lambdabar_z, lambdabar_x=lambdabar_x,
        Lambda_h=Lambda_h, lbar_h=lbar_h,
        Lstar_1=Lstar_1, Lstar_2=Lstar_2, Lstar_3=Lstar_3,
        Lstar_4=Lstar_4, Lstar_5=Lstar_5, Lstar_6=Lstar_6, Lstar_0=Lstar_0,
        Lbar_k=Lbar_k, k0=k0,
        L_f=L_f, L_g=L_g, L_k=L_k, L_alpha=L_alpha,
        Lbar_p=Lbar_p, L_B=L_B, Lbar_B=Lbar_B,
        eps3=eps3, eps4=eps4, eps1=eps1,
    )


def model_ledger(model: ModelSpec, with_alpha_anchor: bool = True) -> ConstantsReport:
    """Constants report for a model, anchors taken from the model itself."""
    vals = model.anchor_values()
    alpha0 = 0.0
    if with_alpha_anchor:
        from .control import ControlSolveConfig, solve_alpha

        a0 = solve_alpha(np.zeros(model.d_x), dirac(0.0, model.d_x),
                         np.zeros(model.d_x), model, ControlSolveConfig())
        alpha0 = float(np.linalg.norm(a0))
    anchors = AnchorValues(f0=vals["f0"], dxg0=vals["dxg0"], dag0=vals["dag0"],
                           dmug0=vals["dmug0"], dxk0=vals["dxk0"], dmuk0=vals["dmuk0"],
                           alpha0=alpha0)
    return compute_constants(model.constants, anchors)


# ---------------------------------------------------------------------------
# Assumption checker
# ---------------------------------------------------------------------------


@dataclass
class ConditionRecord:
    name: str
    sampled: bool
    worst_margin: float
    witness: dict
    passed: bool
    tolerance: float

    def to_dict(self):
        return {
            "name": self.name, "sampled": self.sampled,
            "worst_margin": self.worst_margin, "witness": self.witness,
            "pass": self.passed, "tolerance": self.tolerance,
        }


@dataclass
class AssumptionReport:
    conditions: list = field(default_factory=list)

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.conditions)

    def __getitem__(self, name: str) -> ConditionRecord:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c.name for c in self.conditions if not c.passed]

    def to_json(self, indent: int = 2) -> str:
        return json.dumps([c.to_dict() for c in self.conditions], indent=indent)


def _opnorm(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim <= 1:
        return float(np.linalg.norm(M.reshape(-1)))
    if M.shape[-1] == 1 and M.shape[-2] == 1:
        return float(np.max(np.abs(M)))
    return float(np.linalg.norm(M.reshape(M.shape[-2], M.shape[-1]), ord=2))


def _f_block_norm(T) -> float:
    """Norm of a (d_x, ., .) stacked derivative of the vector drift."""
    T = np.asarray(T, dtype=float)
    return float(np.sqrt(np.sum(T ** 2)))


def check_assumptions(model: ModelSpec, cloud: Optional[dict] = None,
                      tolerance: float = 1e-9) -> AssumptionReport:
    """Sample the structural assumptions and report the worst margins.

    ``cloud`` keys: ``n_points`` (default 200), ``radius`` (default 3.0),
    ``seed`` (default 0).  A sampled certificate only: passing means no
    violated inequality was found among the probes.
    """
    cloud = dict(cloud or {})
    n_points = int(cloud.get("n_points", 200))
    radius = float(cloud.get("radius", 3.0))
    seed = int(cloud.get("seed", 0))
    rng = np.random.default_rng(seed)
    mc = model.constants
    dx, da = model.d_x, model.d_alpha

    worst = {}

    def upd(name, margin, witness):
        if name not in worst or margin < worst[name][0]:
            worst[name] = (float(margin), witness)

    prev_probe = None
    prev_d2 = None
    for _ in range(n_points):
        x = rng.uniform(-radius, radius, dx)
        n_atoms = int(rng.integers(1, 6))
        atoms = rng.uniform(-radius, radius, (n_atoms, dx))
        mu = ParticleMeasure(atoms)
        alpha = rng.uniform(-radius, radius, da)
        xt = rng.uniform(-radius, radius, dx)
        xh = rng.uniform(-radius, radius, dx)
        xi_x = rng.normal(size=dx)
        xi_x /= np.linalg.norm(xi_x)
        xi_a = rng.normal(size=da)
        xi_a /= np.linalg.norm(xi_a)
        wit = {"x": x.tolist(), "atoms": atoms.tolist(), "alpha": alpha.tolist(),
               "xt": xt.tolist(), "xh": xh.tolist()}

        daf = np.asarray(model.da_f(x, mu, alpha))
        upd("a1_i_control_coercivity",
            float(np.sum((xi_x @ daf) ** 2)) - mc.lambda_f, wit)

        d1 = max(_opnorm(daf), _opnorm(model.dmu_f(x, mu, alpha, xt)),
                 _opnorm(model.dx_f(x, mu, alpha)))
        upd("a1_ii_first_derivative_bound", mc.Lambda_f - d1, wit)

        d2_f = {
            "dmumu_f": model.dmumu_f(x, mu, alpha, xt, xh),
            "daa_f": model.daa_f(x, mu, alpha),
            "damu_f": model.damu_f(x, mu, alpha, xt),
            "dax_f": model.dax_f(x, mu, alpha),
            "dxx_f": model.dxx_f(x, mu, alpha),
            "dtmu_f": model.dtmu_f(x, mu, alpha, xt),
            "dxmu_f": model.dxmu_f(x, mu, alpha, xt),
        }
        weight = 1.0 + float(np.linalg.norm(x)) + mu.mean_abs_norm()
        d2max = max(_f_block_norm(v) for v in d2_f.values())
        upd("a1_iii_second_derivative_decay", mc.lbar_f - weight * d2max, wit)

        probe = (x, mu, alpha, xt, xh, weight)
        if prev_probe is not None:
            px, pmu, pa, pxt, pxh, pw = prev_probe
            dist = (np.linalg.norm(x - px) + w1_distance(mu, pmu) if mu.n_atoms == pmu.n_atoms and dx == 1
                    else np.linalg.norm(x - px))
            dist += float(np.linalg.norm(alpha - pa) + np.linalg.norm(xt - pxt) + np.linalg.norm(xh - pxh))
            if dist > 1e-8:
                diff = max(_f_block_norm(np.asarray(d2_f[n]) - np.asarray(prev_d2[n])) for n in d2_f)
                ratio = diff * min(weight, pw) / dist
                # Lipschitz-with-decay: finite sampled ratio is the certificate
                margin = 0.0 if np.isfinite(ratio) else -np.inf
                w2 = dict(wit)
                w2["lip_ratio"] = float(ratio)
                upd("a1_iv_second_derivative_lipschitz", margin, w2)
        prev_probe = probe
        prev_d2 = d2_f

        daa_g = np.asarray(model.daa_g(x, mu, alpha))
        upd("a2_i_control_convexity", float(xi_a @ daa_g @ xi_a) - mc.lambda_g, wit)

        # G(x, mu, a) = g + int (dg/dmu)(xtilde)(x) dmu(xtilde):
        # d_xx G = dxx_g(x) + mean_j dtmu_g(y_j, probe=x)
        dxxG = np.asarray(model.dxx_g(x, mu, alpha)) + np.mean(
            np.asarray(model.dtmu_g(atoms, mu, alpha[None, :], x[None, :])), axis=0)
        upd("a2_ii_a_state_convexity_G",
            float(xi_x @ 0.5 * (dxxG + dxxG.T) @ xi_x) - mc.lambda_g, wit)

        Xt = rng.normal(size=(n_atoms, dx))
        upd("a2_ii_b_measure_monotonicity_g",
            _monotonicity_margin(model, mu, alpha, Xt, mc.l_g, kind="g"), wit)

        g2_main = max(_opnorm(model.dmumu_g(x, mu, alpha, xt, xh)),
                      _opnorm(daa_g),
                      _opnorm(model.dxmu_g(x, mu, alpha, xt)),
                      _opnorm(model.dxx_g(x, mu, alpha)),
                      _opnorm(model.dtmu_g(x, mu, alpha, xt)))
        upd("a2_iii_a_second_derivative_bound_g", mc.Lambda_g - g2_main, wit)
        g2_cross = max(_opnorm(model.dax_g(x, mu, alpha)),
                       _opnorm(model.damu_g(x, mu, alpha, xt)))
        upd("a2_iii_b_cross_derivative_bound_g", mc.lbar_g - g2_cross, wit)

        dxxK = np.asarray(model.dxx_k(x, mu)) + np.mean(
            np.asarray(model.dtmu_k(atoms, mu, x[None, :])), axis=0)
        upd("a3_i_a_state_convexity_K",
            float(xi_x @ 0.5 * (dxxK + dxxK.T) @ xi_x) - mc.lambda_k, wit)
        upd("a3_i_b_measure_monotonicity_k",
            _monotonicity_margin(model, mu, None, Xt, mc.l_k, kind="k"), wit)
        k2 = max(_opnorm(model.dmumu_k(x, mu, xt, xh)),
                 _opnorm(model.dxmu_k(x, mu, xt)),
                 _opnorm(model.dxx_k(x, mu)),
                 _opnorm(model.dtmu_k(x, mu, xt)))
        upd("a3_ii_second_derivative_bound_k", mc.Lambda_k - k2, wit)

    res = model.h1_residuals()
    upd("h1_origin_stationarity", -float(np.max(np.abs(res))),
        {"x": [0.0] * dx, "atoms": [[0.0] * dx], "alpha": [0.0] * da,
         "residuals": res.tolist()})

    ledger = compute_constants(mc)
    h2_margin = min(mc.lambda_g - 8.0 * mc.lbar_g,
                    mc.lambda_g / (40.0 * max(ledger.Lbar_k, ledger.Lstar_0)) - mc.lbar_f)
    upd("h2_smallness", h2_margin, {"Lstar_0": ledger.Lstar_0, "lbar_f": mc.lbar_f})

    report = AssumptionReport()
    for name in sorted(worst):
        tol = 1e-12 if name == "h1_origin_stationarity" else tolerance
        margin, wit = worst[name]
        report.conditions.append(ConditionRecord(
            name=name, sampled=name not in ("h1_origin_stationarity", "h2_smallness"),
            worst_margin=margin, witness=wit, passed=bool(margin >= -tol), tolerance=tol,
        ))
    return report


def _monotonicity_margin(model, mu, alpha, Xt, l_const, kind):
    """Discrete triple-sum monotonicity margin; nonnegative iff satisfied."""
    atoms = mu.atoms
    N = atoms.shape[0]
    if kind == "g":
        dxmu = np.asarray(model.dxmu_g(atoms[:, None, :], mu, alpha, atoms[None, :, :]))
        dmumu = np.asarray(model.dmumu_g(
            atoms[:, None, None, :], mu, alpha, atoms[None, :, None, :], atoms[None, None, :, :]))
    else:
        dxmu = np.asarray(model.dxmu_k(atoms[:, None, :], mu, atoms[None, :, :]))
        dmumu = np.asarray(model.dmumu_k(
            atoms[:, None, None, :], mu, atoms[None, :, None, :], atoms[None, None, :, :]))
    # term1: state slot at y_t, probe at y_h
    t1 = np.einsum("ta,thab,hb->", Xt, dxmu, Xt) / N ** 2
    # term2: state slot at y_h, probe at y_t (transposed pairing)
    t2 = np.einsum("tb,htab,ha->", Xt, dxmu, Xt) / N ** 2
    # term3: base point y_y, probes (y_t, y_h)
    t3 = np.einsum("ta,ythab,hb->", Xt, dmumu, Xt) / N ** 3
    s = float(t1 + t2 + t3)
    return s + l_const * float(np.sum(Xt ** 2)) / N


# ---------------------------------------------------------------------------
# Value function and derivative-identity checks
# ---------------------------------------------------------------------------


def value_function(run, model: ModelSpec) -> float:
    """Discrete cost along a converged run: terminal average plus trapezoid
    time integral of the average running cost."""
    bundle = getattr(run, "bundle", run)
    X, alpha = bundle.X, bundle.alpha
    nodes = bundle.grid.nodes
    g_avg = np.empty(len(nodes))
    for n in range(len(nodes)):
        mu_n = ParticleMeasure(X[n])
        g_avg[n] = float(np.mean(np.asarray(model.g(X[n], mu_n, alpha[n]))))
    mu_T = ParticleMeasure(X[-1])
    terminal = float(np.mean(np.asarray(model.k(X[-1], mu_T))))
    return terminal + float(np.trapezoid(g_avg, nodes))


def _default_solver(model, cfg):
    from .global_solve import solve_global

    def run(T, m):
        return solve_global(T, m, model, cfg)

    return run


def dmv_identity_check(T: float, m: ParticleMeasure, model: ModelSpec, cfg,
                       h: float = 1e-4, atom_indices=None, scheme: str = "central",
                       solver=None) -> tuple:
    """Deviation between the measure gradient of the value and the adjoint.

    For sampled atoms ``i`` and unit directions ``e``, compares the finite
    difference of ``v(0, .)`` under single-atom perturbation against
    ``Z_0(x_i) . e / N``.  Returns ``(max_deviation, details)``.
    """
    solver = solver or _default_solver(model, cfg)
    base = solver(T, m)
    base_bundle = getattr(base, "bundle", base)
    v0 = value_function(base_bundle, model)
    Z0 = base_bundle.Z[0]
    N, dx = m.n_atoms, m.dim
    if atom_indices is None:
        atom_indices = range(min(N, 5))
    devs = []
    details = []
    for i in atom_indices:
        for c in range(dx):
            e = np.zeros(dx)
            e[c] = 1.0
            vp = value_function(solver(T, m.perturb_atom(i, h * e)), model)
            if scheme == "central":
                vm = value_function(solver(T, m.perturb_atom(i, -h * e)), model)
                fd = (vp - vm) / (2.0 * h)
            else:
                fd = (vp - v0) / h
            target = float(Z0[i] @ e) / N
            devs.append(abs(fd - target))
            details.append({"atom": int(i), "dir": int(c), "fd": fd, "target": target})
    return float(max(devs)), details


def bellman_residual(T: float, m: ParticleMeasure, model: ModelSpec, cfg,
                     ht: float = 1e-3, solver=None) -> float:
    """Residual of the dynamic-programming equation at the initial time.

    The time derivative is a one-sided difference of the value over a
    shortened horizon (coefficients are autonomous, so ``v(ht, m)`` equals
    the value of the ``T - ht`` horizon problem); the spatial term uses the
    verified identity of the measure gradient with the adjoint.
    """
    solver = solver or _default_solver(model, cfg)
    run0 = solver(T, m)
    bundle0 = getattr(run0, "bundle", run0)
    v0 = value_function(bundle0, model)
    run1 = solver(T - ht, m)
    v1 = value_function(getattr(run1, "bundle", run1), model)
    dt_v = (v1 - v0) / ht

    X0 = bundle0.X[0]
    Z0 = bundle0.Z[0]
    a0 = bundle0.alpha[0]
    mu0 = ParticleMeasure(X0)
    fvals = np.asarray(model.f(X0, mu0, a0))
    gvals = np.asarray(model.g(X0, mu0, a0))
    spatial = float(np.mean(np.sum(fvals * Z0, axis=-1) + gvals))
    return abs(dt_v + spatial)


def lfd_consistency_check(T: float, m: ParticleMeasure, model: ModelSpec, cfg,
                          theta: float, probes=None, h: float = 1e-3,
                          solver=None) -> tuple:
    """Check that the state gradient of the flat-derivative quotient matches
    the decoupling field at the initial time.

    The mixture ``(1 - theta) m + theta delta_x`` is realized by appending
    ``ceil(theta N / (1 - theta))`` copies of the probe atom, which keeps the
    uniform-weight invariant; the effective mixing weight ``c / (N + c)`` is
    reported alongside the deviation.
    """
    if not (0 < theta < 1):
        raise ConfigError("theta must lie in (0, 1)")
    solver = solver or _default_solver(model, cfg)
    base = solver(T, m)
    base_bundle = getattr(base, "bundle", base)
    v_base = value_function(base_bundle, model)
    field = getattr(base, "field", None)
    N = m.n_atoms
    c = math.ceil(theta * N / (1.0 - theta))
    theta_eff = c / (N + c)
    if probes is None:
        lo, hi = float(m.atoms.min()), float(m.atoms.max())
        pad = 0.25 * (hi - lo + 1.0)
        probes = np.linspace(lo + pad, hi - pad, 3) if hi > lo else np.array([lo])

    def u_of(xv):
        mix = ParticleMeasure(np.vstack([m.atoms, np.tile(np.atleast_1d(xv), (c, 1))]))
        run = solver(T, mix)
        v_mix = value_function(getattr(run, "bundle", run), model)
        return (v_mix - v_base) / theta_eff

    devs = []
    details = []
    for xv in np.atleast_1d(probes):
        du = (u_of(xv + h) - u_of(xv - h)) / (2.0 * h)
        gamma0 = float(field.eval_at(0, np.atleast_2d(xv))[0, 0]) if field is not None else float("nan")
        devs.append(abs(du - gamma0))
        details.append({"x": float(xv), "dx_u": float(du), "gamma0": gamma0,
                        "u": float(u_of(xv)), "theta_eff": theta_eff})
    return float(max(devs)), details
