"""Vector math shared by the detector, steering and evaluation code.

Hidden states are float32 numpy arrays. Reductions that feed decisions
(cosines, entropies, k-means distances) run in float64 so that results do
not depend on summation order inside BLAS.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_LLOYD_ITERS = 300


class DomainError(ValueError):
    """Input lies outside the domain of an operation (zero vector, bad index...)."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


def as_vec(values, dtype=np.float32) -> np.ndarray:
    """Coerce to a 1-D finite vector."""
    v = np.asarray(values, dtype=dtype)
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("vector has non-finite entries")
    return v


def norm(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(np.sqrt(np.dot(u, u)))


def cosine(u, v) -> float:
    """Cosine of the angle between two nonzero vectors, clipped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = norm(u), norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine of a zero vector is undefined")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def unit_normalize(u) -> np.ndarray:
    u = np.asarray(u)
    n = norm(u)
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    out = np.asarray(u, dtype=np.float64) / n
    return out.astype(u.dtype if u.dtype.kind == "f" else np.float64)


def direction_or_zero(u) -> np.ndarray:
    """Unit direction of ``u``, or the zero vector when ``u`` is zero."""
    u = np.asarray(u)
    if norm(u) == 0.0:
        return np.zeros_like(u, dtype=np.float64)
    return np.asarray(u, dtype=np.float64) / norm(u)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def softmax_entropy(logits) -> float:
    """Shannon entropy (nats) of softmax(logits), stable under max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DomainError("logits must be a non-empty vector")
    z = z - z.max()
    ez = np.exp(z)
    s = ez.sum()
    # H = log s - sum(ez * z) / s ; avoids log(0) for underflowed entries
    h = float(np.log(s) - np.dot(ez, z) / s)
    return max(0.0, h)


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (K, d) float64
    assignments: np.ndarray  # (n,) int
    inertia: float
    restart: int = 0
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=len(self.centroids))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion,
    # which can go slightly negative and break exact-zero inertia
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def inertia_of(points, centroids, assignments) -> float:
    x = np.asarray(points, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    diff = x - c[np.asarray(assignments)]
    return float(np.einsum("nd,nd->", diff, diff))


def _lloyd(x: np.ndarray, init: np.ndarray, max_iter: int):
    centroids = init.copy()
    k = len(centroids)
    history: list[float] = []
    labels = None
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(len(x)), new_labels]
        history.append(float(point_cost.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # reseed each empty centroid at the point farthest from its centroid
            cost = _sq_dists(x, centroids)[np.arange(len(x)), labels]
            taken: set[int] = set()
            for j in np.flatnonzero(~nonempty):
                order = np.argsort(-cost, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centroids[j] = x[idx]
    else:
        it = max_iter
    final = _sq_dists(x, centroids)
    labels = np.argmin(final, axis=1)
    inertia = float(final[np.arange(len(x)), labels].sum())
    return centroids, labels, inertia, it, history


def kmeans(points, k: int, restarts: int = 20, seed: int = 0,
           max_iter: int = MAX_LLOYD_ITERS) -> ClusterResult:
    """Lloyd's k-means with ``restarts`` seeded random initialisations.

    Each restart samples ``k`` distinct points as initial centroids using
    ``np.random.default_rng([seed, restart])``. The lowest-inertia restart
    wins; ties go to the earliest restart.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("points must be a 2-D array (n, d)")
    if k < 1 or restarts < 1:
        raise ConfigError("k and restarts must be positive")
    if len(x) < k:
        raise ConfigError(f"need at least k={k} points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise DomainError("points contain non-finite values")

    best: ClusterResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        init = x[rng.choice(len(x), size=k, replace=False)]
        c, labels, inertia, n_iter, hist = _lloyd(x, init, max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterResult(c, labels, inertia, r, n_iter, hist)
    return best
