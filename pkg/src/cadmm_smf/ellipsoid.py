"""Ellipsoid type, size criteria, Minkowski-sum outer bound and sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import as_generator

SPD_RATIO = 1e-12


class AcceptanceFailure(RuntimeError):
    """Raised when accept-reject sampling cannot collect enough points."""

    def __init__(self, accepted: int, requested: int, tries: int):
        super().__init__(
            f"accepted {accepted} of {requested} requested samples in {tries} tries"
        )
        self.accepted = accepted
        self.requested = requested
        self.tries = tries


class SizeCriterion(enum.Enum):
    TRACE = "trace"
    LOGDET = "logdet"


class SampleMode(enum.Enum):
    BOUNDARY = "boundary"
    INTERIOR = "interior"


@dataclass(frozen=True)
class Ellipsoid:
    """The set ``{x : (x - center)^T shape^{-1} (x - center) <= 1}``.

    The shape matrix is symmetrized on construction and rejected when it is not
    numerically positive definite. The eigendecomposition is computed once and
    reused by sampling, membership and size evaluation.
    """

    center: np.ndarray
    shape: np.ndarray
    _eig: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(-1)
        shape = np.array(self.shape, dtype=float)
        n = center.size
        if shape.shape != (n, n):
            raise ValueError(f"shape must be {n}x{n}, got {shape.shape}")
        shape = 0.5 * (shape + shape.T)
        if not np.all(np.isfinite(shape)) or not np.all(np.isfinite(center)):
            raise ValueError("ellipsoid has non-finite entries")
        w, V = np.linalg.eigh(shape)
        if w[0] <= 0 or w[0] < SPD_RATIO * w[-1]:
            raise ValueError(f"shape matrix is not positive definite (eigenvalues {w})")
        center.setflags(write=False)
        shape.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "_eig", (w, V))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        return self._eig

    @property
    def factor(self) -> np.ndarray:
        """L = V diag(sqrt(w)) with L @ L.T == shape."""
        w, V = self._eig
        return V * np.sqrt(w)

    @property
    def semiaxes(self) -> np.ndarray:
        return np.sqrt(self._eig[0])

    def inv_shape(self) -> np.ndarray:
        w, V = self._eig
        return (V / w) @ V.T

    def membership(self, x) -> np.ndarray:
        """Quadratic form (x-c)^T P^{-1} (x-c); accepts a point or an (s, n) array."""
        x = np.asarray(x, dtype=float)
        w, V = self._eig
        y = (x - self.center) @ V
        return np.sum(y * y / w, axis=-1)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.membership(x) <= 1.0 + tol

    def size(self, criterion: SizeCriterion | str = SizeCriterion.LOGDET) -> float:
        return size(self, criterion)

    def logdet(self) -> float:
        return float(np.sum(np.log(self._eig[0])))

    def scaled(self, factor: float) -> "Ellipsoid":
        """Same center, shape multiplied by ``factor``."""
        return Ellipsoid(self.center, self.shape * factor)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Ellipsoid":
        return cls(np.asarray(d["center"]), np.asarray(d["shape"]))


@dataclass(frozen=True)
class ProjectionSelector:
    """Coordinate selection playing the role of the m x n projection matrix."""

    n: int
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("selector indices must be distinct")
        if any(i < 0 or i >= self.n for i in idx):
            raise ValueError(f"selector indices {idx} out of range for n={self.n}")
        object.__setattr__(self, "indices", idx)

    @property
    def m(self) -> int:
        return len(self.indices)

    def matrix(self) -> np.ndarray:
        G = np.zeros((self.m, self.n))
        G[np.arange(self.m), self.indices] = 1.0
        return G

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., list(self.indices)]


def size(E: Ellipsoid, criterion: SizeCriterion | str = SizeCriterion.LOGDET) -> float:
    criterion = SizeCriterion(criterion)
    if criterion is SizeCriterion.TRACE:
        return float(np.trace(E.shape))
    return E.logdet()


def trace_optimal_tau(P_f: np.ndarray, Q: np.ndarray) -> float:
    """Minimizer over tau > 0 of tr((1 + 1/tau) P_f + (1 + tau) Q)."""
    P_f = np.asarray(P_f, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P_f.shape != Q.shape or P_f.ndim != 2:
        raise ValueError(f"dimension mismatch: {P_f.shape} vs {Q.shape}")
    return float(np.sqrt(np.trace(P_f) / np.trace(Q)))


def minkowski_outer(E_f: Ellipsoid, Q: np.ndarray, tau: float) -> Ellipsoid:
    """Outer ellipsoid of ``E_f (+) E(0, Q)`` in the tau-parameterized family.

    The center is passed through untouched, so any constraint satisfied by
    ``E_f.center`` is satisfied by the result.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    Q = np.asarray(Q, dtype=float)
    shape = (1.0 + 1.0 / tau) * E_f.shape + (1.0 + tau) * Q
    out = Ellipsoid(E_f.center, shape)
    # keep the identical center array so equality is exact
    object.__setattr__(out, "center", E_f.center)
    return out


def unit_sphere(count: int, n: int, rng) -> np.ndarray:
    u = rng.standard_normal((count, n))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sample_ellipsoid(
    E: Ellipsoid, mode: SampleMode | str, count: int, rng=None
) -> np.ndarray:
    """Draw ``count`` points on the boundary of, or uniformly inside, ``E``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = as_generator(rng)
    mode = SampleMode(mode)
    n = E.dim
    u = unit_sphere(count, n, rng)
    if mode is SampleMode.INTERIOR:
        u *= rng.random(count)[:, None] ** (1.0 / n)
    return E.center + u @ E.factor.T


def sample_mixed(E: Ellipsoid, count: int, boundary_fraction: float, rng=None) -> np.ndarray:
    """Boundary and interior samples of ``E`` stacked in that order."""
    rng = as_generator(rng)
    nb = int(round(boundary_fraction * count))
    parts = []
    if nb > 0:
        parts.append(sample_ellipsoid(E, SampleMode.BOUNDARY, nb, rng))
    if count - nb > 0:
        parts.append(sample_ellipsoid(E, SampleMode.INTERIOR, count - nb, rng))
    return np.vstack(parts)


def sample_intersection(
    E_pred: Ellipsoid,
    E_meas: Ellipsoid,
    G: ProjectionSelector | Sequence[int],
    count: int,
    max_tries: int,
    rng=None,
    batch: int = 4096,
) -> np.ndarray:
    """Accept-reject samples of ``{x in E_pred : G x in E_meas}``.

    Candidates are drawn uniformly from the interior of ``E_pred``. Raises
    :class:`AcceptanceFailure` when fewer than ``count`` are accepted within
    ``max_tries`` candidates.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if max_tries < count:
        raise ValueError("max_tries must be >= count")
    if not isinstance(G, ProjectionSelector):
        G = ProjectionSelector(E_pred.dim, tuple(G))
    if G.m != E_meas.dim:
        raise ValueError("selector output dimension does not match E_meas")
    rng = as_generator(rng)
    accepted = []
    n_acc = 0
    tries = 0
    while n_acc < count and tries < max_tries:
        k = min(batch, max_tries - tries)
        cand = sample_ellipsoid(E_pred, SampleMode.INTERIOR, k, rng)
        tries += k
        ok = E_meas.membership(G(cand)) <= 1.0
        if ok.any():
            accepted.append(cand[ok])
            n_acc += int(ok.sum())
    if n_acc < count:
        raise AcceptanceFailure(n_acc, count, tries)
    return np.vstack(accepted)[:count]
