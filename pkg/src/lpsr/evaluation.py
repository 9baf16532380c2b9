"""Statistics, detector metrics, sweeps and rollback summaries."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import stats

from .detector import GateConfig
from .engine import EngineConfig, GenerationTrace, generate_lpsr
from .numerics import ConfigError, DomainError, direction_or_zero, softmax_entropy
from .problems import EOS, extract_answer
from .steering import SteeringBasis

P_FLOOR = 1e-16


class UndefinedMetric(ValueError):
    """A statistic is undefined for the given counts (e.g. single-class AUC)."""


# ---------------------------------------------------------------- ROC AUC

def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise DomainError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative label")
    ranks = stats.rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- confusion

@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DomainError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _ratio(num, den):
    return num / den if den else None


def confusion_metrics(c: Confusion) -> dict:
    """precision, recall, f1 and fpr; a zero denominator yields None (undefined), never 0."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1,
            "fpr": _ratio(c.fp, c.fp + c.tn)}


# ---------------------------------------------------------------- McNemar

class McNemarResult(NamedTuple):
    chi2: float
    p: float

    @property
    def p_str(self) -> str:
        return f"<{P_FLOOR:.0e}" if self.p < P_FLOOR else f"{self.p:.3g}"


def mcnemar(b: int, c: int, correction: bool = True) -> McNemarResult:
    """McNemar chi-square on discordant counts, continuity-corrected by default.

    The corrected statistic is the plain ``(|b - c| - 1)^2 / (b + c)``, unclamped,
    so ``b == c`` gives ``1 / (b + c)`` rather than 0.
    """
    if b < 0 or c < 0:
        raise DomainError("discordant counts must be nonnegative")
    if b + c == 0:
        raise UndefinedMetric("McNemar undefined with no discordant pairs")
    diff = abs(b - c) - (1.0 if correction else 0.0)
    chi2 = diff * diff / (b + c)
    return McNemarResult(float(chi2), float(stats.chi2.sf(chi2, df=1)))


# ---------------------------------------------------------------- intervals

def clopper_pearson(k: int, n: int, conf: float = 0.95) -> tuple[float, float]:
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"invalid binomial counts k={k}, n={n}")
    a = 1.0 - conf
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def bootstrap_ci(outcomes, resamples: int = 10_000, conf: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``outcomes``."""
    x = np.asarray(outcomes, dtype=np.float64)
    if x.size == 0:
        raise DomainError("no outcomes to resample")
    rng = np.random.default_rng(seed)
    n = len(x)
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, resamples, chunk):
        m = min(chunk, resamples - start)
        means[start:start + m] = x[rng.integers(0, n, size=(m, n))].mean(axis=1)
    a = 1.0 - conf
    lo, hi = np.quantile(means, [a / 2, 1 - a / 2])
    return float(lo), float(hi)


# ---------------------------------------------------------------- matched pairs

@dataclass(frozen=True)
class MatchedPairs:
    both_correct: int
    a_only: int
    b_only: int
    both_wrong: int

    @property
    def n(self) -> int:
        return self.both_correct + self.a_only + self.b_only + self.both_wrong


def _by_id(traces) -> dict[str, GenerationTrace]:
    out = {}
    for tr in traces:
        if tr.problem_id in out:
            raise DomainError(f"duplicate problem id {tr.problem_id}")
        out[tr.problem_id] = tr
    return out


def matched_pairs(traces_a, traces_b) -> MatchedPairs:
    a, b = _by_id(traces_a), _by_id(traces_b)
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))[:5]
        raise DomainError(f"trace sets cover different problems (e.g. {missing})")
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    for pid in a:
        ca, cb = a[pid].correct, b[pid].correct
        if ca is None or cb is None:
            raise DomainError(f"problem {pid} has no correctness label")
        counts[(bool(ca), bool(cb))] += 1
    return MatchedPairs(counts[(True, True)], counts[(True, False)],
                        counts[(False, True)], counts[(False, False)])


def accuracy(traces) -> float:
    traces = list(traces)
    if not traces:
        raise DomainError("no traces")
    return sum(bool(t.correct) for t in traces) / len(traces)


def stratified_accuracy(traces, key: str = "difficulty") -> dict:
    groups: dict = {}
    for tr in traces:
        groups.setdefault(tr.metadata.get(key), []).append(bool(tr.correct))
    return {k: (sum(v) / len(v), len(v))
            for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}


# ---------------------------------------------------------------- detector metrics

def detector_confusion(traces, *, gate: GateConfig | None = None) -> Confusion:
    """Per-problem confusion of a detector against final-answer incorrectness.

    A problem is flagged when any recorded step passes the gate. ``gate``
    re-evaluates the logged (c_t, H_t) pairs under a different gate setting,
    e.g. ``GateConfig(tau_phi, 0)`` for the cosine gate alone.
    """
    tp = fp = fn = tn = 0
    for tr in traces:
        if tr.correct is None:
            raise DomainError(f"trace {tr.problem_id} has no correctness label")
        if gate is None:
            flagged = any(d.authenticated for d in tr.decisions)
        else:
            flagged = any(d.c_t < -gate.tau_phi and (gate.tau_H == 0 or d.H_t > gate.tau_H)
                          for d in tr.decisions)
        wrong = not tr.correct
        if flagged and wrong:
            tp += 1
        elif flagged:
            fp += 1
        elif wrong:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    axis: tuple[str, ...]
    records: list[dict] = field(default_factory=list)

    def __post_init__(self):
        keys = [tuple(r[a] for a in self.axis) for r in self.records]
        if len(set(keys)) != len(keys):
            raise DomainError("duplicate axis values in sweep")

    @property
    def columns(self) -> list[str]:
        cols = list(self.axis)
        for r in self.records:
            cols.extend(k for k in r if k not in cols)
        return cols


@dataclass
class LayerScan:
    """Per-problem, per-layer min cosine and dual-gate flag from one hooked greedy pass."""

    min_cos: np.ndarray  # (n_problems, n_layers)
    flagged: np.ndarray  # (n_problems, n_layers) bool
    incorrect: np.ndarray  # (n_problems,) bool
    passes: int


def scan_layers(model, problems, gate: GateConfig, max_T: int) -> LayerScan:
    L = model.n_layers
    layers = tuple(range(L))
    min_cos = np.ones((len(problems), L))
    flagged = np.zeros((len(problems), L), dtype=bool)
    incorrect = np.zeros(len(problems), dtype=bool)
    for i, prob in enumerate(problems):
        ep = model.episode(prob, max_T)
        prev, tokens = ep.first_token, []
        v_prev = np.zeros((L, model.d))
        while len(tokens) < max_T:
            out = ep.step(prev, hooks=None, lens=layers)
            ep.cache.append(out.kv_delta)
            for l in layers:
                v = direction_or_zero(out.hidden[l])
                c = float(np.dot(v, v_prev[l])) if v_prev[l].any() else 0.0
                min_cos[i, l] = min(min_cos[i, l], c)
                if c < -gate.tau_phi and (gate.tau_H == 0
                                          or softmax_entropy(out.lens_logits[l]) > gate.tau_H):
                    flagged[i, l] = True
                v_prev[l] = v
            tokens.append(out.token)
            prev = out.token
            if out.token == EOS:
                break
        if prob.gold_answer is None:
            raise DomainError(f"problem {prob.id} has no gold answer")
        incorrect[i] = extract_answer(tokens) != prob.gold_answer
    return LayerScan(min_cos, flagged, incorrect, len(problems))


def layer_sweep(model, problems, gate: GateConfig, max_T: int = 128) -> SweepResult:
    """Detection AUC of the min-cosine score at every layer, one hooked pass per problem."""
    scan = scan_layers(model, problems, gate, max_T)
    records = []
    for l in range(model.n_layers):
        try:
            auc = roc_auc(-scan.min_cos[:, l], scan.incorrect)
        except UndefinedMetric:
            auc = None
        f = scan.flagged[:, l]
        y = scan.incorrect
        conf = Confusion(int((f & y).sum()), int((f & ~y).sum()),
                         int((~f & y).sum()), int((~f & ~y).sum()))
        m = confusion_metrics(conf)
        records.append({"layer": l, "auc": auc, "precision": m["precision"],
                        "recall": m["recall"], "f1": m["f1"],
                        "flip_rate": float(f.mean()) if len(f) else None,
                        "n": len(y), "n_incorrect": int(y.sum())})
    return SweepResult(("layer",), records)


@dataclass(frozen=True)
class GridSpace:
    tau_phi: tuple[float, ...] = (0.3, 0.45, 0.6, 0.75)
    tau_H: tuple[float, ...] = (1.5, 2.0, 2.5, 3.0)
    alpha_max: tuple[float, ...] = (0.05, 0.10, 0.15, 0.22)
    l_crit: tuple[int, ...] = (12, 14, 16, 18, 20)

    def cells(self):
        return list(itertools.product(sorted(self.tau_phi), sorted(self.tau_H),
                                      sorted(self.alpha_max), sorted(self.l_crit)))


def run_summary(traces) -> dict:
    traces = list(traces)
    n = len(traces)
    return {
        "accuracy": accuracy(traces),
        "rollback_rate": sum(t.n_rollbacks > 0 for t in traces) / n,
        "mean_rollbacks": sum(t.n_rollbacks for t in traces) / n,
        "mean_token_cost": sum(t.token_cost for t in traces) / n,
        "n": n,
    }


def grid_search(model, problems, space: GridSpace, bases, base_cfg: EngineConfig | None = None
                ) -> SweepResult:
    """LPSR accuracy and rollback rate for every cell of a Cartesian grid.

    ``bases`` is a single basis (used at every layer, the cross-layer setting)
    or a mapping from layer to basis.
    """
    cells = space.cells()
    if not cells:
        raise ConfigError("empty hyperparameter grid")
    base_cfg = base_cfg or EngineConfig()
    records = []
    for tau_phi, tau_H, alpha_max, l_crit in cells:
        if isinstance(bases, SteeringBasis):
            basis, cross = bases, bases.layer != l_crit
        else:
            basis, cross = bases[l_crit], False
        cfg = replace(base_cfg, mode="lpsr", l_crit=l_crit, alpha_max=alpha_max,
                      gate=GateConfig(tau_phi, tau_H), allow_layer_mismatch=cross)
        traces = [generate_lpsr(model, p, cfg, basis) for p in problems]
        records.append({"tau_phi": tau_phi, "tau_H": tau_H, "alpha_max": alpha_max,
                        "l_crit": l_crit, **run_summary(traces)})
    return SweepResult(("tau_phi", "tau_H", "alpha_max", "l_crit"), records)


# ---------------------------------------------------------------- rollback timing

ROLLBACK_BUCKETS = ("0", "1", "2", "3", "4+")


def rollback_stats(traces) -> dict:
    traces = list(traces)
    if not traces:
        raise DomainError("no traces")
    fracs = [ev.position_fraction for tr in traces for ev in tr.events]
    buckets: dict[str, list[bool]] = {}
    for tr in traces:
        key = "4+" if tr.n_rollbacks >= 4 else str(tr.n_rollbacks)
        buckets.setdefault(key, []).append(bool(tr.correct))
    return {
        "n_events": len(fracs),
        "mean_fraction": float(np.mean(fracs)) if fracs else None,
        "median_fraction": float(np.median(fracs)) if fracs else None,
        "accuracy_by_rollback_count": {k: sum(buckets[k]) / len(buckets[k])
                                       for k in ROLLBACK_BUCKETS if k in buckets},
        "count_by_rollback_count": {k: len(buckets[k]) for k in ROLLBACK_BUCKETS if k in buckets},
    }


def fmt(x, digits: int = 4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "undefined"
    if isinstance(x, float):
        return f"{x:.{digits}f}"
    return str(x)
