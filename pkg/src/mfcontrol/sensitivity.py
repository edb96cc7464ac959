"""Jacobian flows of the solved system in the initial point and measure.

Differentiating the coupled forward-backward system along a converged
trajectory gives linear two-point problems.  The point-derivative pair
(DxX, DxZ) closes per particle: the feedback slope along the flow equals
DxZ . DxX^{-1}, so a matrix Riccati sweep for that ratio followed by one
forward integration solves the pair without any field-slope input (the
"ratio" route); a slope closure using the sampled field's spatial slopes is
kept as the independent cross-check.  The measure-derivative pair is the
same construction at the level of the full N x N particle kernel: the
backward Riccati matrix is the complete sensitivity of adjoints to states,
and subtracting the per-particle diagonal rescales the kernel so that
(1/N) sum_j DmX[i][j] d_j is the derivative along a measure perturbation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .analysis import ConstantsReport
from .errors import CapabilityError, InstabilityError
from .fbode import DecouplingFieldSample, TrajectoryBundle
from .measure import ParticleMeasure


@dataclass
class JacobianBundle:
    grid: object
    DxX: np.ndarray
    DxZ: np.ndarray
    DmX: np.ndarray = None
    DmZ: np.ndarray = None
    ratio_slope: np.ndarray = None

    def full_state_jacobian(self, node: int) -> np.ndarray:
        """Exact derivative of states at ``node`` w.r.t. initial atoms:
        D[i, j] = delta_ij DxX_i + DmX[i, j] / N."""
        if self.DmX is None:
            raise CapabilityError("measure kernel not computed")
        N = self.DxX.shape[1]
        D = self.DmX[node] / N
        for i in range(N):
            D[i, i] += self.DxX[node, i]
        return D

    def full_adjoint_jacobian(self, node: int) -> np.ndarray:
        if self.DmZ is None:
            raise CapabilityError("measure kernel not computed")
        N = self.DxZ.shape[1]
        D = self.DmZ[node] / N
        for i in range(N):
            D[i, i] += self.DxZ[node, i]
        return D


def _alpha_sensitivities(x, mu, z, alpha, model):
    """Per-particle minimizer derivatives and Newton matrix at one node."""
    J = (np.einsum("iajk,ia->ijk", np.asarray(model.daa_f(x, mu, alpha)), z)
         + np.asarray(model.daa_g(x, mu, alpha)))
    Jinv = np.linalg.inv(J)
    rx = (np.einsum("iajk,ia->ijk", np.asarray(model.dax_f(x, mu, alpha)), z)
          + np.asarray(model.dax_g(x, mu, alpha)))
    dxa = -np.einsum("ijk,ikl->ijl", Jinv, rx)
    daf = np.asarray(model.da_f(x, mu, alpha))
    dza = -np.einsum("ijk,iak->ija", Jinv, daf)
    return J, Jinv, dxa, dza, daf


def _node_coefficients(bundle: TrajectoryBundle, model):
    """Per-node coefficient matrices of the point-derivative linear system.

    Returns dict of arrays over (nodes, N, d, d): a_x, a_z, b_x, b_z and the
    terminal matrix c_T (N, d, d).
    """
    X, Z, alpha = bundle.X, bundle.Z, bundle.alpha
    n_nodes, N, d = X.shape
    a_x = np.empty((n_nodes, N, d, d))
    a_z = np.empty_like(a_x)
    b_x = np.empty_like(a_x)
    b_z = np.empty_like(a_x)
    for n in range(n_nodes):
        x, z, al = X[n], Z[n], alpha[n]
        mu = ParticleMeasure(x)
        _, _, dxa, dza, daf = _alpha_sensitivities(x, mu, z, al, model)
        dxf = np.asarray(model.dx_f(x, mu, al))
        a_x[n] = dxf + np.einsum("iae,ieb->iab", daf, dxa)
        a_z[n] = np.einsum("iae,ieb->iab", daf, dza)
        # probe-slot curvature of the measure coupling, averaged over atoms
        dtmuf = np.asarray(model.dtmu_f(x[:, None, :], mu, al[:, None, :], x[None, :, :]))
        dtmug = np.asarray(model.dtmu_g(x[:, None, :], mu, al[:, None, :], x[None, :, :]))
        M1 = (np.einsum("liabc,la->ibc", dtmuf, z) + dtmug.sum(axis=0)) / N
        M2 = (np.einsum("iabc,ia->ibc", np.asarray(model.dxx_f(x, mu, al)), z)
              + np.asarray(model.dxx_g(x, mu, al)))
        # N3[i, b, e] = z . d2f/da_e dx_b + d2g/da_e dx_b
        N3 = (np.einsum("iaeb,ia->ibe", np.asarray(model.dax_f(x, mu, al)), z)
              + np.swapaxes(np.asarray(model.dax_g(x, mu, al)), -1, -2))
        b_x[n] = M1 + M2 + np.einsum("ibe,ieD->ibD", N3, dxa)
        b_z[n] = np.einsum("ibe,iec->ibc", N3, dza) + np.swapaxes(dxf, -1, -2)
    xT = X[-1]
    muT = ParticleMeasure(xT)
    dtmuk = np.asarray(model.dtmu_k(xT[:, None, :], muT, xT[None, :, :]))
    c_T = np.asarray(model.dxx_k(xT, muT)) + dtmuk.mean(axis=0)
    return {"a_x": a_x, "a_z": a_z, "b_x": b_x, "b_z": b_z, "c_T": c_T}


def _rk4_matrix_backward(S_T, rhs, coeffs_at, n_nodes, dt):
    """Integrate dS/ds = rhs(S, coeffs) backward on the node grid."""
    S = np.empty((n_nodes,) + S_T.shape)
    S[-1] = S_T
    for n in range(n_nodes - 2, -1, -1):
        c1 = coeffs_at(n + 1)
        cm = coeffs_at(n + 0.5)
        c0 = coeffs_at(n)
        s = S[n + 1]
        k1 = rhs(s, c1)
        k2 = rhs(s - 0.5 * dt * k1, cm)
        k3 = rhs(s - 0.5 * dt * k2, cm)
        k4 = rhs(s - dt * k3, c0)
        S[n] = s - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(S[n])):
            raise InstabilityError(f"Riccati sweep diverged at node {n}")
    return S


def _rk4_matrix_forward(U_0, rhs, coeffs_at, n_nodes, dt):
    U = np.empty((n_nodes,) + U_0.shape)
    U[0] = U_0
    for n in range(n_nodes - 1):
        c0 = coeffs_at(n)
        cm = coeffs_at(n + 0.5)
        c1 = coeffs_at(n + 1)
        u = U[n]
        k1 = rhs(u, c0)
        k2 = rhs(u + 0.5 * dt * k1, cm)
        k3 = rhs(u + 0.5 * dt * k2, cm)
        k4 = rhs(u + dt * k3, c1)
        U[n + 1] = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(U[n + 1])):
            raise InstabilityError(f"Jacobian flow diverged at node {n}")
    return U


def _interp_coeff(arrs, t):
    lo = int(np.floor(t))
    if lo == t:
        return tuple(a[lo] for a in arrs)
    hi = min(lo + 1, arrs[0].shape[0] - 1)
    w = t - lo
    return tuple((1.0 - w) * a[lo] + w * a[hi] for a in arrs)


def solve_jacobian_x(bundle: TrajectoryBundle, model, field_slope=None,
                     closure: str = "riccati"):
    """Point-derivative flows (DxX, DxZ), shape (nodes, N, d, d).

    ``closure='riccati'`` solves the per-particle two-point problem through
    the ratio matrix DxZ . DxX^{-1} and needs no slope input;
    ``closure='slope'`` integrates the forward flow against supplied field
    slopes (array (nodes, N, d, d) or a field sample) and the backward flow
    from the terminal matrix, the paper-faithful variant used to cross-check
    the ratio route.
    """
    co = _node_coefficients(bundle, model)
    n_nodes, N, d = bundle.X.shape
    dt = bundle.grid.dt
    eye = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    if closure == "riccati":
        def rhs_S(S, c):
            a_x, a_z, b_x, b_z = c
            return (-b_x - np.einsum("ibc,icd->ibd", b_z, S)
                    - np.einsum("ibc,icd->ibd", S, a_x)
                    - np.einsum("ibc,icd,ide->ibe", S, a_z, S))

        coeffs = (co["a_x"], co["a_z"], co["b_x"], co["b_z"])
        S = _rk4_matrix_backward(co["c_T"], rhs_S, lambda t: _interp_coeff(coeffs, t),
                                 n_nodes, dt)

        def rhs_U(U, c):
            a_x, a_z, Sn = c
            return np.einsum("ibc,icd->ibd", a_x + np.einsum("ibe,ied->ibd", a_z, Sn), U)

        DxX = _rk4_matrix_forward(eye, rhs_U, lambda t: _interp_coeff((co["a_x"], co["a_z"], S), t),
                                  n_nodes, dt)
        DxZ = np.einsum("nibc,nicd->nibd", S, DxX)
        return DxX, DxZ, S
    if closure != "slope":
        raise CapabilityError("closure must be 'riccati' or 'slope'")
    if field_slope is None:
        raise CapabilityError("slope closure requires field_slope")
    if isinstance(field_slope, DecouplingFieldSample):
        slopes = np.empty((n_nodes, N, d, d))
        for n in range(n_nodes):
            slopes[n] = field_slope.slope_at(n, bundle.X[n])[:, :, None]
    else:
        slopes = np.asarray(field_slope, dtype=float).reshape(n_nodes, N, d, d)

    def rhs_U(U, c):
        a_x, a_z, sl = c
        return np.einsum("ibc,icd->ibd", a_x + np.einsum("ibe,ied->ibd", a_z, sl), U)

    DxX = _rk4_matrix_forward(eye, rhs_U, lambda t: _interp_coeff((co["a_x"], co["a_z"], slopes), t),
                              n_nodes, dt)
    DxZ_T = np.einsum("ibc,icd->ibd", co["c_T"], DxX[-1])

    def rhs_V(V, c):
        b_x, b_z, dxx = c
        return -(np.einsum("ibc,icd->ibd", b_x, dxx) + np.einsum("ibc,icd->ibd", b_z, V))

    DxZ = _rk4_matrix_backward(DxZ_T, rhs_V, lambda t: _interp_coeff((co["b_x"], co["b_z"], DxX), t),
                               n_nodes, dt)
    return DxX, DxZ, None


def _kernel_coefficients(bundle: TrajectoryBundle, model):
    """Per-node N x N coefficient matrices of the full variational system
    (scalar states only): forward AX, AZ and backward BX, BZ plus terminal CT.
    """
    X, Z, alpha = bundle.X, bundle.Z, bundle.alpha
    n_nodes, N, d = X.shape
    if d != 1 or model.d_alpha != 1:
        raise CapabilityError("measure-kernel Jacobians are implemented for d_x = d_alpha = 1")
    AX = np.empty((n_nodes, N, N))
    AZ = np.empty_like(AX)
    BX = np.empty_like(AX)
    BZ = np.empty_like(AX)
    eye = np.eye(N)
    for n in range(n_nodes):
        x, z, al = X[n, :, 0], Z[n, :, 0], alpha[n, :, 0]
        xc, ac = X[n], alpha[n]
        mu = ParticleMeasure(X[n])
        col = xc[:, None, :]
        row = xc[None, :, :]
        alc = ac[:, None, :]
        J = (np.asarray(model.daa_f(xc, mu, ac))[:, 0, 0, 0] * z
             + np.asarray(model.daa_g(xc, mu, ac))[:, 0, 0])
        daf = np.asarray(model.da_f(xc, mu, ac))[:, 0, 0]
        dxf = np.asarray(model.dx_f(xc, mu, ac))[:, 0, 0]
        dxa = -(np.asarray(model.dax_f(xc, mu, ac))[:, 0, 0, 0] * z
                + np.asarray(model.dax_g(xc, mu, ac))[:, 0, 0]) / J
        dza = -daf / J
        # P[l, j] = d(FOC_l)/dmu at probe x_j; dmua[l, j] = -P[l, j]/J_l
        P = (np.asarray(model.damu_f(col, mu, alc, row))[:, :, 0, 0, 0] * z[:, None]
             + np.asarray(model.damu_g(col, mu, alc, row))[:, :, 0, 0])
        dmua = -P / J[:, None]
        dmuf = np.asarray(model.dmu_f(col, mu, alc, row))[:, :, 0, 0]
        dtmuf = np.asarray(model.dtmu_f(col, mu, alc, row))[:, :, 0, 0, 0]
        dtmug = np.asarray(model.dtmu_g(col, mu, alc, row))[:, :, 0, 0]
        dxmuf = np.asarray(model.dxmu_f(col, mu, alc, row))[:, :, 0, 0, 0]
        dxmug = np.asarray(model.dxmu_g(col, mu, alc, row))[:, :, 0, 0]
        M1 = (dtmuf * z[:, None] + dtmug).sum(axis=0) / N
        M2 = (np.asarray(model.dxx_f(xc, mu, ac))[:, 0, 0, 0] * z
              + np.asarray(model.dxx_g(xc, mu, ac))[:, 0, 0])
        N3 = (np.asarray(model.dax_f(xc, mu, ac))[:, 0, 0, 0] * z
              + np.asarray(model.dax_g(xc, mu, ac))[:, 0, 0])
        # three-point tensor of second measure derivatives, summed over base atoms
        d3f = np.asarray(model.dmumu_f(
            xc[:, None, None, :], mu, ac[:, None, None, :],
            xc[None, :, None, :], xc[None, None, :, :]))[..., 0, 0, 0]
        d3g = np.asarray(model.dmumu_g(
            xc[:, None, None, :], mu, ac[:, None, None, :],
            xc[None, :, None, :], xc[None, None, :, :]))[..., 0, 0]
        Csum = np.einsum("lij,l->ij", d3f, z) + d3g.sum(axis=0)

        AX[n] = np.diag(dxf + daf * dxa) + (dmuf + daf[:, None] * dmua) / N
        AZ[n] = np.diag(daf * dza)
        # rows are the adjoint component i, columns the perturbed state j
        BX[n] = (
            np.diag(M1 + M2 + N3 * dxa)
            + (dxmuf.T * z[None, :] + dxmug.T) / N
            + Csum / N ** 2
            + (P.T * dxa[None, :]) / N
            + np.einsum("li,lj->ij", P, dmua) / N ** 2
            + (dxmuf * z[:, None] + dxmug) / N
            + (N3[:, None] * dmua) / N
        )
        BZ[n] = np.diag(N3 * dza + dxf) + (dmuf.T + P.T * dza[None, :]) / N
    xT = X[-1]
    muT = ParticleMeasure(xT)
    colT = xT[:, None, :]
    rowT = xT[None, :, :]
    dtmuk = np.asarray(model.dtmu_k(colT, muT, rowT))[:, :, 0, 0]
    dxmuk = np.asarray(model.dxmu_k(colT, muT, rowT))[:, :, 0, 0]
    dmumuk = np.asarray(model.dmumu_k(
        xT[:, None, None, :], muT, xT[None, :, None, :], xT[None, None, :, :]))[..., 0, 0]
    dxxk = np.asarray(model.dxx_k(xT, muT))[:, 0, 0]
    N_ = xT.shape[0]
    CT = (np.diag(dxxk + dtmuk.sum(axis=0) / N_)
          + dxmuk / N_ + dxmuk.T / N_
          + dmumuk.sum(axis=0) / N_ ** 2)
    return AX, AZ, BX, BZ, CT


def solve_jacobian_m(bundle: TrajectoryBundle, model, dx_pair=None,
                     n_cap: int = 200):
    """Measure-kernel flows (DmX, DmZ), shape (nodes, N, N), scalar states.

    Solves the exact variational two-point problem of the discrete system
    with a full-matrix Riccati sweep, then splits off the per-particle point
    derivative so that the kernel scales as a measure derivative:
    DmX[i][j] = N (dX_i/dx_j - delta_ij DxX_i).
    """
    n_nodes, N, d = bundle.X.shape
    if N > n_cap:
        raise CapabilityError(f"N = {N} exceeds the N^2-kernel cap {n_cap}")
    AX, AZ, BX, BZ, CT = _kernel_coefficients(bundle, model)
    dt = bundle.grid.dt

    def rhs_S(S, c):
        ax, az, bx, bz = c
        return -bx - bz @ S - S @ ax - S @ az @ S

    S = _rk4_matrix_backward(CT, rhs_S, lambda t: _interp_coeff((AX, AZ, BX, BZ), t),
                             n_nodes, dt)

    def rhs_U(U, c):
        ax, az, Sn = c
        return (ax + az @ Sn) @ U

    U = _rk4_matrix_forward(np.eye(N), rhs_U, lambda t: _interp_coeff((AX, AZ, S), t),
                            n_nodes, dt)
    V = np.einsum("nij,njk->nik", S, U)
    if dx_pair is None:
        DxX, DxZ, _ = solve_jacobian_x(bundle, model, closure="riccati")
    else:
        DxX, DxZ = dx_pair
    DmX = N * U.copy()
    DmZ = N * V.copy()
    idx = np.arange(N)
    DmX[:, idx, idx] -= N * DxX[:, :, 0, 0]
    DmZ[:, idx, idx] -= N * DxZ[:, :, 0, 0]
    return DmX, DmZ


def compute_jacobians(bundle: TrajectoryBundle, model, with_measure: bool = True,
                      n_cap: int = 200) -> JacobianBundle:
    DxX, DxZ, S = solve_jacobian_x(bundle, model, closure="riccati")
    DmX = DmZ = None
    if with_measure:
        DmX, DmZ = solve_jacobian_m(bundle, model, dx_pair=(DxX, DxZ), n_cap=n_cap)
    return JacobianBundle(grid=bundle.grid, DxX=DxX, DxZ=DxZ, DmX=DmX, DmZ=DmZ,
                          ratio_slope=S)


@dataclass
class AprioriReport:
    sup_slope_ratio: float
    sup_slope_field: float
    sup_measure_sensitivity: float
    slope_bound: float
    cone_margin_min: float
    singular_nodes: int
    slope_ok: bool
    cone_ok: bool
    details: dict = dc_field(default_factory=dict)

    def to_json(self, indent: int = 2) -> str:
        d = {k: v for k, v in self.__dict__.items()}
        return json.dumps(d, indent=indent, default=float)


def verify_apriori(jac: JacobianBundle, field: DecouplingFieldSample,
                   constants: ConstantsReport, cond_cap: float = 1e6) -> AprioriReport:
    """Compare empirical feedback slopes and cone margins against the ledger.

    The spatial slope is taken both from the ratio DxZ . DxX^{-1} (where the
    point flow is well conditioned) and from the sampled field's knot slopes;
    the certificate is flow-restricted by construction.
    """
    n_nodes, N = jac.DxX.shape[:2]
    sup_ratio = 0.0
    singular = 0
    for n in range(n_nodes):
        for i in range(N):
            A = jac.DxX[n, i]
            sv = np.linalg.svd(A, compute_uv=False)
            if sv[-1] <= 0 or sv[0] / sv[-1] > cond_cap:
                singular += 1
                continue
            R = jac.DxZ[n, i] @ np.linalg.inv(A)
            sup_ratio = max(sup_ratio, float(np.linalg.norm(R, 2)))
    sup_field = field.max_abs_slope() if field.mode == "field" else float("nan")
    sup_meas = 0.0
    if jac.DmZ is not None:
        sup_meas = float(np.max(np.abs(jac.DmZ[0])))
    k0 = constants.k0
    margin = np.inf
    for n in range(n_nodes):
        pos = field.positions[n]
        mu = ParticleMeasure(pos)
        bound = 0.5 * k0 * (1.0 + np.linalg.norm(pos, axis=1) + mu.mean_abs_norm())
        margin = min(margin, float(np.min(bound - np.linalg.norm(field.values[n], axis=1))))
    sup_slope = max(sup_ratio, sup_field if np.isfinite(sup_field) else 0.0)
    return AprioriReport(
        sup_slope_ratio=sup_ratio,
        sup_slope_field=sup_field,
        sup_measure_sensitivity=sup_meas,
        slope_bound=constants.Lstar_0,
        cone_margin_min=margin,
        singular_nodes=singular,
        slope_ok=bool(sup_slope <= constants.Lstar_0),
        cone_ok=bool(margin >= 0.0),
        details={"k0": k0},
    )
