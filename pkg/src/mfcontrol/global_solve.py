"""Global-in-time solve by pasting local solutions over sub-intervals.

The backward pass solves each sub-interval with terminal data handed off from
the interval to its right (the terminal cost gradient on the last one); a
forward pass then re-propagates the particles through the pasted field to
refresh the interior measures, and the two passes alternate Gauss-Seidel
style until the full-horizon defect certificate stabilizes below tolerance.
A numeric field over all measures is infeasible, so the sweeps work over the
single flow launched from the given initial cloud; the residual certificate
is what certifies the outcome, independently of the schedule.

The theoretical admissible sub-interval length is available from the
constants ledger but is extremely conservative; the solver first tries a
practical cap and falls back by halving whenever a local iteration refuses to
contract.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .analysis import ConstantsReport, model_ledger
from .control import ControlSolveConfig, solve_alpha
from .errors import (ComparisonError, ConfigError, GlobalSolveError,
                     NonContractionError, StagnationError)
from .fbode import (DecouplingFieldSample, PicardConfig, PicardResult,
                    SampleFieldEvaluator, TerminalFunctionField, TimeGrid,
                    TrajectoryBundle, fbode_residual, field_handoff_terminal,
                    k_gradient_terminal, picard_local, solve_forward)
from .measure import ParticleMeasure

logger = logging.getLogger("mfcontrol")


@dataclass(frozen=True)
class GlobalConfig:
    dt: float = 1e-3
    eps_sub_cap: float = 0.1
    residual_tol: float = 1e-6
    max_sweeps: int = 30
    picard: PicardConfig = PicardConfig()
    control: ControlSolveConfig = ControlSolveConfig()

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.eps_sub_cap <= 0:
            raise ConfigError("eps_sub_cap must be positive")
        if self.residual_tol <= 0:
            raise ConfigError("residual_tol must be positive")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1")


@dataclass
class Partition:
    """Sub-interval breakpoints over the global grid; interior intervals share
    a common step count and the first one is never longer."""

    boundaries: list
    times: np.ndarray

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1


def build_partition(grid: TimeGrid, steps_sub: int) -> Partition:
    bounds = [grid.steps]
    while bounds[-1] > 0:
        bounds.append(max(0, bounds[-1] - steps_sub))
    bounds.reverse()
    return Partition(boundaries=bounds, times=grid.nodes[bounds])


def admissible_sublength(constants: ConstantsReport) -> float:
    """The smallest of the three explicit interval-length formulas, evaluated
    with the terminal-slope bound taken from the ledger."""
    eps = min(constants.eps3, constants.eps4, constants.eps1)
    if not (eps > 0):
        raise ConfigError("constants inconsistency: nonpositive admissible length")
    return eps


@dataclass
class GlobalSolveReport:
    bundle: TrajectoryBundle
    field: DecouplingFieldSample
    strategy: str
    eps_sub: float
    sweeps: int
    interval_iters: list
    residual: object
    cone_margin_min: float
    gamma_slope_sup: float
    diagnostics: dict = dc_field(default_factory=dict)

    def summary(self) -> dict:
        g = self.bundle.grid
        return {
            "strategy": self.strategy,
            "t0": g.t0, "t1": g.t1, "steps": g.steps, "dt": g.dt,
            "n_particles": self.bundle.n_particles,
            "eps_sub": self.eps_sub,
            "sweeps": self.sweeps,
            "interval_iters": self.interval_iters,
            "residual": self.residual.to_dict(),
            "cone_margin_min": self.cone_margin_min,
            "gamma_slope_sup": self.gamma_slope_sup,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.summary(), indent=indent)


class _PastedField:
    """Full-horizon field evaluator backed by per-interval samples."""

    def __init__(self, boundaries, fields):
        self.boundaries = boundaries
        self.fields = [SampleFieldEvaluator(f) for f in fields]

    def _locate(self, k):
        # step k belongs to the interval whose [b_i, b_{i+1}) contains it
        for i in range(len(self.boundaries) - 1):
            if self.boundaries[i] <= k < self.boundaries[i + 1]:
                return i, k - self.boundaries[i]
        return len(self.fields) - 1, k - self.boundaries[-2]

    def eval_stage(self, k, theta, positions, mu):
        i, local = self._locate(k)
        return self.fields[i].eval_stage(local, theta, positions, mu)

    def eval_node(self, n, positions, mu):
        # interior breakpoints read the right interval's first node (the
        # hand-off makes both sides bitwise equal there)
        if n == self.boundaries[-1]:
            i, local = len(self.fields) - 1, n - self.boundaries[-2]
        else:
            i, local = self._locate(n)
        return self.fields[i].eval_node(local, positions, mu)


def _assemble_bundle(grid, boundaries, fields, m, model, cfg) -> TrajectoryBundle:
    """Forward pass through the pasted field; adjoint read off per node."""
    pasted = _PastedField(boundaries, fields)
    X, alpha = solve_forward(grid, m, pasted, model, cfg.picard, cfg.control)
    Z = np.empty_like(X)
    for n in range(grid.n_nodes):
        Z[n] = pasted.eval_node(n, X[n], None)
    return TrajectoryBundle(grid, X, Z, alpha)


def _cone_margin_min(bundle: TrajectoryBundle, k0: float) -> float:
    out = np.inf
    for n in range(bundle.grid.n_nodes):
        mu = ParticleMeasure(bundle.X[n])
        bound = 0.5 * k0 * (1.0 + np.linalg.norm(bundle.X[n], axis=1) + mu.mean_abs_norm())
        out = min(out, float(np.min(bound - np.linalg.norm(bundle.Z[n], axis=1))))
    return out


class _AndersonMixer:
    """Anderson (type II) mixing on the flattened trajectory path.

    One sweep maps the interior trajectory to a new one through the backward
    pass and re-propagation; the map contracts but its rate degrades with the
    horizon, so the outer loop extrapolates over the last few iterates.
    The extrapolated path only seeds the next backward pass; the defect
    certificate is always evaluated on an un-extrapolated assembly.
    """

    def __init__(self, depth: int = 3):
        self.depth = depth
        self.xs = []
        self.gs = []

    def push(self, x_flat, g_flat):
        self.xs.append(x_flat)
        self.gs.append(g_flat)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)

    def next_iterate(self):
        if len(self.xs) < 2:
            return self.gs[-1]
        F = [g - x for g, x in zip(self.gs, self.xs)]
        dF = np.stack([F[i + 1] - F[i] for i in range(len(F) - 1)], axis=1)
        try:
            theta, *_ = np.linalg.lstsq(dF, F[-1], rcond=None)
        except np.linalg.LinAlgError:
            return self.gs[-1]
        if not np.all(np.isfinite(theta)) or np.abs(theta).max() > 50.0:
            return self.gs[-1]
        dG = np.stack([self.gs[i + 1] - self.gs[i] for i in range(len(self.gs) - 1)], axis=1)
        return self.gs[-1] - dG @ theta


def _sweep(grid, m, model, cfg, boundaries, warm_fields=None, min_sweeps=1):
    """Backward/forward Gauss-Seidel sweeps over one partition.

    Returns (bundle, fields, sweeps, interval_iters, residual).
    """
    n_int = len(boundaries) - 1
    terminal_map = k_gradient_terminal(model)
    fields = list(warm_fields) if warm_fields is not None else [None] * n_int
    nodes = grid.nodes

    if all(f is not None for f in fields):
        seed_eval = _PastedField(boundaries, fields)
    else:
        seed_eval = TerminalFunctionField(terminal_map)
    X_path, _ = solve_forward(grid, m, seed_eval, model, cfg.picard, cfg.control)

    interval_iters = [0] * n_int
    mixer = _AndersonMixer()
    best = np.inf
    stalls = 0
    for sweep in range(1, cfg.max_sweeps + 1):
        for k in range(n_int - 1, -1, -1):
            b0, b1 = boundaries[k], boundaries[k + 1]
            sub = TimeGrid(float(nodes[b0]), float(nodes[b1]), b1 - b0)
            m_k = ParticleMeasure(X_path[b0])
            term = terminal_map if k == n_int - 1 else field_handoff_terminal(fields[k + 1], 0)
            res_k = picard_local(sub, m_k, term, model, cfg.picard, cfg.control,
                                 warm_field=fields[k])
            fields[k] = res_k.field
            interval_iters[k] = res_k.iters
        bundle = _assemble_bundle(grid, boundaries, fields, m, model, cfg)
        resid = fbode_residual(bundle, model, cfg.control)
        logger.info("sweep %d residual %.3e", sweep, resid.max)
        if resid.max <= cfg.residual_tol and sweep >= min_sweeps:
            return bundle, fields, sweep, interval_iters, resid
        mixer.push(X_path.ravel().copy(), bundle.X.ravel().copy())
        X_path = mixer.next_iterate().reshape(bundle.X.shape)
        if resid.max > 0.99 * best:
            stalls += 1
            if stalls >= 5:
                raise StagnationError(
                    f"residual plateaued at {resid.max:.3e} above tol {cfg.residual_tol:g}")
        else:
            stalls = 0
        best = min(best, resid.max)
    raise StagnationError(
        f"residual {resid.max:.3e} above tol {cfg.residual_tol:g} after {cfg.max_sweeps} sweeps")


def solve_global(T: float, m: ParticleMeasure, model, cfg: GlobalConfig = GlobalConfig(),
                 strategy: str = "sweep") -> GlobalSolveReport:
    """Solve the control system on [0, T] from the initial cloud ``m``.

    ``strategy`` selects the schedule: ``sweep`` partitions once and
    alternates backward/forward passes; ``continuation`` grows the horizon
    leftward one sub-interval at a time, warm-starting the fields.  Both
    return the same fixed point; the defect certificate in the report is the
    acceptance criterion either way.
    """
    if T <= 0:
        raise ConfigError("T must be positive")
    if strategy not in ("sweep", "continuation"):
        raise ConfigError("strategy must be 'sweep' or 'continuation'")
    n_steps = int(round(T / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - T) > 1e-9 * max(1.0, T):
        raise ConfigError("T must be an integer multiple of dt")
    grid = TimeGrid(0.0, float(T), n_steps)

    steps_sub = max(1, min(n_steps, int(round(cfg.eps_sub_cap / cfg.dt))))
    last_err = None
    while True:
        partition = build_partition(grid, steps_sub)
        try:
            if strategy == "sweep" and partition.n_intervals == 1:
                res = picard_local(grid, m, k_gradient_terminal(model), model,
                                   cfg.picard, cfg.control)
                bundle, fields = res.bundle, [res.field]
                sweeps, iters = 1, [res.iters]
                resid = fbode_residual(bundle, model, cfg.control)
                if resid.max > cfg.residual_tol:
                    raise StagnationError(
                        f"single-interval residual {resid.max:.3e} above tolerance")
            elif strategy == "sweep":
                bundle, fields, sweeps, iters, resid = _sweep(
                    grid, m, model, cfg, partition.boundaries)
            else:
                bundle, fields, sweeps, iters, resid = _continuation(
                    grid, m, model, cfg, partition.boundaries)
            break
        except NonContractionError as err:
            last_err = err
            if steps_sub <= 1:
                raise GlobalSolveError(
                    f"local solve failed to contract even at dt-sized intervals: {err}")
            steps_sub = max(1, steps_sub // 2)
            logger.warning("halving sub-interval to %d steps after non-contraction", steps_sub)

    full_field = DecouplingFieldSample(grid, bundle.X.copy(), bundle.Z.copy(),
                                       mode="field" if m.dim == 1 else "trajectory")
    k0 = model_ledger(model).k0
    slope = full_field.max_abs_slope() if m.dim == 1 else float("nan")
    report = GlobalSolveReport(
        bundle=bundle,
        field=full_field,
        strategy=strategy,
        eps_sub=steps_sub * cfg.dt,
        sweeps=sweeps,
        interval_iters=iters,
        residual=resid,
        cone_margin_min=_cone_margin_min(bundle, k0),
        gamma_slope_sup=slope,
        diagnostics={"k0": k0, "halved_from_cap": bool(last_err is not None)},
    )
    return report


def _continuation(grid, m, model, cfg, boundaries):
    """Grow the horizon leftward, warm-starting fields from shorter horizons."""
    n_int = len(boundaries) - 1
    nodes = grid.nodes
    fields = [None] * n_int
    out = None
    for j in range(1, n_int + 1):
        start = n_int - j
        sub_bounds = [b - boundaries[start] for b in boundaries[start:]]
        sub_grid = TimeGrid(0.0, float(nodes[-1] - nodes[boundaries[start]]),
                            grid.steps - boundaries[start])
        warm = fields[start:]
        bundle, new_fields, sweeps, iters, resid = _sweep(
            sub_grid, m, model, cfg, sub_bounds,
            warm_fields=warm if any(f is not None for f in warm) else None)
        fields[start:] = new_fields
        out = (bundle, new_fields, sweeps, iters, resid)
    return out


def agreement_check(report_a: GlobalSolveReport, report_b: GlobalSolveReport) -> float:
    """Uniqueness as cross-strategy agreement: max node/particle deviation."""
    ga, gb = report_a.bundle.grid, report_b.bundle.grid
    if (ga.t0, ga.t1, ga.steps) != (gb.t0, gb.t1, gb.steps):
        raise ComparisonError("grids differ; reports are not comparable")
    if report_a.bundle.X.shape != report_b.bundle.X.shape:
        raise ComparisonError("particle counts differ; reports are not comparable")
    dev = np.abs(report_a.bundle.X - report_b.bundle.X).sum(axis=-1) \
        + np.abs(report_a.bundle.Z - report_b.bundle.Z).sum(axis=-1)
    return float(dev.max())
