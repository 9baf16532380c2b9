"""Steering basis calibration and runtime selection.

Calibration: correction deltas (teacher-forced minus free-running hidden at
the first phase shift) are clustered with k-means, the centroids are
unit-normalised, and a greedy pass drops near-duplicate directions.
Runtime: exact max-inner-product selection plus the adaptive step size.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import mpmath
import numpy as np

from .numerics import ConfigError, DomainError, cosine, direction_or_zero, kmeans, norm

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


@dataclass
class SteeringBasis:
    vectors: np.ndarray  # (count, d) float32
    layer: int
    cfg_digest: int = 0
    # calibration metadata, not serialised
    info: dict = field(default_factory=dict)
    check_unit: bool = True

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float32))
        if self.check_unit and len(self.vectors):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise DomainError(f"basis vectors must be unit-norm; norms {norms.min():.6g}..{norms.max():.6g}")

    @property
    def count(self) -> int:
        return len(self.vectors)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class CorrectionDelta:
    delta: np.ndarray
    problem_id: str
    t_star: int  # 1-based step of the first phase shift


def basis_digest(tau_phi: float, k: int, seed: int, ortho_threshold: float) -> int:
    payload = json.dumps({"tau_phi": float(tau_phi), "K": int(k), "seed": int(seed),
                          "ortho": float(ortho_threshold)}, sort_keys=True)
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "little")


def step_cosines(hiddens) -> list[float]:
    """Per-step cosine with the previous step's direction; step 1 compares against 0 and gets 0."""
    out, prev = [], None
    for h in hiddens:
        v = direction_or_zero(h)
        if prev is None or not prev.any() or not v.any():
            out.append(0.0)
        else:
            out.append(float(np.clip(np.dot(v, prev), -1.0, 1.0)))
        prev = v
    return out


def extract_delta(wrong_hiddens, right_hiddens, tau_phi: float,
                  problem_id: str = "") -> CorrectionDelta | None:
    if len(wrong_hiddens) == 0 or len(right_hiddens) == 0:
        raise DomainError("trajectories must be non-empty")
    cs = step_cosines(wrong_hiddens)
    t_star = next((i + 1 for i, c in enumerate(cs) if c < -tau_phi), None)
    if t_star is None:
        return None
    if t_star > len(right_hiddens):
        log.warning("problem %s: phase shift at step %d beyond oracle trajectory of length %d; skipped",
                    problem_id, t_star, len(right_hiddens))
        return None
    delta = (np.asarray(right_hiddens[t_star - 1], dtype=np.float64)
             - np.asarray(wrong_hiddens[t_star - 1], dtype=np.float64))
    return CorrectionDelta(delta.astype(np.float32), problem_id, t_star)


def greedy_orthogonalize(vectors: np.ndarray, order, threshold: float) -> list[int]:
    """Indices accepted in ``order``: each must have |cos| <= threshold with all accepted so far."""
    kept: list[int] = []
    for i in order:
        if all(abs(cosine(vectors[i], vectors[j])) <= threshold for j in kept):
            kept.append(int(i))
    return kept


def build_basis(deltas, k: int, *, restarts: int = 20, ortho_threshold: float = 0.95,
                seed: int = 0, layer: int = 0, tau_phi: float = 0.6) -> SteeringBasis:
    deltas = list(deltas)
    if not 0.0 < ortho_threshold <= 1.0:
        raise ConfigError(f"ortho_threshold must lie in (0, 1], got {ortho_threshold}")
    if len(deltas) < k:
        raise ConfigError(f"K={k} exceeds the {len(deltas)} available deltas")
    x = np.stack([np.asarray(getattr(dl, "delta", dl), dtype=np.float64) for dl in deltas])
    res = kmeans(x, k, restarts=restarts, seed=seed)
    sizes = res.sizes
    usable = [i for i in range(k) if norm(res.centroids[i]) > 0]
    if len(usable) < k:
        log.warning("dropping %d zero centroid(s)", k - len(usable))
    units = np.zeros_like(res.centroids)
    for i in usable:
        units[i] = res.centroids[i] / norm(res.centroids[i])
    # population descending; stable sort keeps lower index first on ties
    order = sorted(usable, key=lambda i: -sizes[i])
    kept = greedy_orthogonalize(units, order, ortho_threshold)
    vecs = units[kept].astype(np.float32)
    info = {"inertia": res.inertia, "n_deltas": len(deltas), "K": k,
            "cluster_sizes": [int(sizes[i]) for i in kept], "restart": res.restart,
            "ortho_threshold": ortho_threshold}
    return SteeringBasis(vecs, layer, basis_digest(tau_phi, k, seed, ortho_threshold), info)


def select_delta(basis: SteeringBasis, h) -> tuple[int, np.ndarray]:
    """argmax_i <delta_i, h> over raw inner products; ties go to the lowest index."""
    if basis.count == 0:
        raise ConfigError("empty steering basis")
    scores = basis.vectors.astype(np.float64) @ np.asarray(h, dtype=np.float64)
    i = int(np.argmax(scores))
    return i, basis.vectors[i]


def select_toward(basis: SteeringBasis, h, h_target) -> tuple[int, np.ndarray]:
    """argmax_i <delta_i, h_target - h>: the exact minimiser of |h + a*delta - h_target|^2."""
    diff = np.asarray(h_target, dtype=np.float64) - np.asarray(h, dtype=np.float64)
    return select_delta(basis, diff)


def adaptive_alpha(c: float, tau_phi: float, alpha_max: float) -> float:
    if alpha_max <= 0 or tau_phi <= 0:
        raise ConfigError("alpha_max and tau_phi must be positive")
    return min(alpha_max, abs(c) / tau_phi * alpha_max)


def injection_ratio(h, add) -> float:
    """|h + add| / |h|, the logged magnitude ratio of an injection."""
    h = np.asarray(h, dtype=np.float64)
    return norm(h + np.asarray(add, dtype=np.float64)) / norm(h)


class ConcentrationBound(NamedTuple):
    exponent: float
    bound: mpmath.mpf  # extended precision; exp(-737.28) underflows a double's normal range

    @property
    def log10_bound(self) -> float:
        return self.exponent / math.log(10)


def concentration_bound(d: int, tau_phi: float) -> ConcentrationBound:
    """Tail bound exp(-d * tau_phi^2 / 2) on a reversal below -tau_phi for a correct path."""
    if d < 1 or not 0 < tau_phi <= 1:
        raise DomainError("need d >= 1 and tau_phi in (0, 1]")
    exponent = -d * tau_phi * tau_phi / 2.0
    with mpmath.workdps(30):
        bound = mpmath.exp(mpmath.mpf(-d) * mpmath.mpf(str(tau_phi)) ** 2 / 2)
    return ConcentrationBound(exponent, bound)
