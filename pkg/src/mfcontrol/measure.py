"""Empirical probability measures with uniform atom weights.

A measure is a cloud of N atoms in R^d, each carrying weight 1/N.  All
measure integrals in the package are plain averages over atoms in fixed
storage order (numpy's pairwise summation), which keeps runs bit-reproducible.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import CapabilityError, ConfigError, NumericError


class ParticleMeasure:
    """Uniform-weight empirical measure; immutable after construction.

    Parameters
    ----------
    atoms : array_like
        Shape (N,) for one-dimensional clouds or (N, d) in general.
    """

    __slots__ = ("atoms", "_stats")

    def __init__(self, atoms):
        arr = np.asarray(atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ConfigError(f"atoms must be (N,) or (N, d) with N >= 1, got shape {np.shape(atoms)}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
            raise NumericError(f"non-finite atom at index {bad}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "atoms", arr)
        object.__setattr__(self, "_stats", {})

    def __setattr__(self, name, value):
        raise AttributeError("ParticleMeasure is immutable")

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def cached_stat(self, key, fn):
        """Memoize a scalar/array statistic of the atom cloud (models use this)."""
        if key not in self._stats:
            self._stats[key] = fn(self.atoms)
        return self._stats[key]

    def mean(self) -> np.ndarray:
        return self.cached_stat("mean", lambda a: a.mean(axis=0))

    def mean_abs_norm(self) -> float:
        """Discrete ||mu||_1 = (1/N) sum_i |x_i| (euclidean atom norms)."""
        return self.cached_stat("m1", lambda a: float(np.linalg.norm(a, axis=1).mean()))

    def second_moment(self) -> float:
        """Discrete ||mu||_2^2 = (1/N) sum_i |x_i|^2."""
        return self.cached_stat("m2", lambda a: float((a ** 2).sum(axis=1).mean()))

    def push_forward(self, map_fn) -> "ParticleMeasure":
        """Image measure under ``map_fn`` applied to every atom.

        ``map_fn`` receives the full (N, d) atom array and must return an
        array of the same shape.
        """
        img = np.asarray(map_fn(self.atoms), dtype=float)
        if img.shape != self.atoms.shape:
            img = img.reshape(self.atoms.shape)
        if not np.all(np.isfinite(img)):
            bad = int(np.argwhere(~np.isfinite(img).all(axis=1))[0, 0])
            raise NumericError(f"push-forward produced non-finite image at atom {bad}")
        return ParticleMeasure(img)

    def perturb_atom(self, index: int, delta) -> "ParticleMeasure":
        """Return a copy with atom ``index`` shifted by ``delta``."""
        if not 0 <= index < self.n_atoms:
            raise ConfigError(f"atom index {index} out of range [0, {self.n_atoms})")
        new = self.atoms.copy()
        new[index] += np.asarray(delta, dtype=float).reshape(self.dim)
        return ParticleMeasure(new)

    # -- serialization ----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(self.dim)])
        for row in self.atoms:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ParticleMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        data = [[float(v) for v in r] for r in rows[1:] if r]
        return cls(np.asarray(data))

    def to_json(self) -> str:
        return json.dumps([[float(v) for v in row] for row in self.atoms])

    @classmethod
    def from_json(cls, text: str) -> "ParticleMeasure":
        return cls(np.asarray(json.loads(text), dtype=float))

    def __repr__(self):
        return f"ParticleMeasure(n={self.n_atoms}, d={self.dim})"


def dirac(point=0.0, dim: int = 1, n_atoms: int = 1) -> ParticleMeasure:
    """Dirac mass at ``point`` represented by ``n_atoms`` coincident atoms."""
    p = np.broadcast_to(np.asarray(point, dtype=float).reshape(-1), (dim,))
    return ParticleMeasure(np.tile(p, (n_atoms, 1)))


def push_forward(mu: ParticleMeasure, map_fn) -> ParticleMeasure:
    return mu.push_forward(map_fn)


def perturb_atom(mu: ParticleMeasure, index: int, delta) -> ParticleMeasure:
    return mu.perturb_atom(index, delta)


def mean_abs_norm(mu: ParticleMeasure) -> float:
    return mu.mean_abs_norm()


def second_moment(mu: ParticleMeasure) -> float:
    return mu.second_moment()


def mean(mu: ParticleMeasure) -> np.ndarray:
    return mu.mean()


def w1_distance(mu: ParticleMeasure, nu: ParticleMeasure, n_exact: int = 12) -> float:
    """Exact Wasserstein-1 distance between two empirical measures.

    1-D clouds are handled for any atom counts via the quantile coupling.
    Higher dimensions require equal atom counts with N <= ``n_exact`` and are
    solved as an exact assignment problem.  Anything else raises
    :class:`CapabilityError`; callers may fall back to the mean-difference
    lower bound |mean(mu) - mean(nu)| (a bound, not a distance).
    """
    if mu.dim != nu.dim:
        raise CapabilityError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        a = np.sort(mu.atoms[:, 0])
        b = np.sort(nu.atoms[:, 0])
        if a.size == b.size:
            return float(np.abs(a - b).mean())
        from scipy.stats import wasserstein_distance

        return float(wasserstein_distance(a, b))
    if mu.n_atoms != nu.n_atoms:
        raise CapabilityError("d > 1 requires equal atom counts")
    if mu.n_atoms > n_exact:
        raise CapabilityError(
            f"exact d>1 transport limited to N <= {n_exact} atoms (got {mu.n_atoms})"
        )
    from scipy.optimize import linear_sum_assignment

    cost = np.linalg.norm(mu.atoms[:, None, :] - nu.atoms[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())
