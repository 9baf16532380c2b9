"""Generation loops: LPSR plus the greedy, static-steer and best-of-N baselines.

Backends (``ToyTransformer``, ``Simulator``) hand out per-problem episodes
with a ``cache``, a ``first_token`` and a ``step(prev_token, inject=..., ...)``
method; the loops here only talk to that surface.
"""
from __future__ import annotations

import os
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import GateConfig, GateDecision, authenticate
from .kvcache import GenerationLengthError, KvCheckpoint
from .numerics import ConfigError, direction_or_zero, softmax_entropy, unit_normalize
from .problems import EOS, Problem, Sampler, extract_answer
from .steering import SteeringBasis, adaptive_alpha, injection_ratio, select_delta

SCHEMA_VERSION = 1
MODES = ("lpsr", "greedy", "static_steer", "best_of_n")


@dataclass(frozen=True)
class EngineConfig:
    l_crit: int = 4
    gate: GateConfig = field(default_factory=GateConfig)
    alpha_max: float = 0.1
    max_T: int = 128
    rollback_depth: int = 1
    rollback_budget: int | None = None  # None = unlimited
    mode: str = "lpsr"
    n: int = 16
    temperature: float = 0.7
    seed: int = 0
    # v_prev after a re-decode: "redecoded" (post-injection state) or "original"
    vprev_policy: str = "redecoded"
    verify_rollback: bool = True
    # permit a basis calibrated at another layer (the cross-layer experiment)
    allow_layer_mismatch: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.l_crit < 0:
            raise ConfigError("l_crit must be >= 0")
        if self.max_T < 1:
            raise ConfigError("max_T must be positive")
        if not 0 <= self.rollback_depth <= self.max_T:
            raise ConfigError(f"rollback_depth must lie in [0, max_T], got {self.rollback_depth}")
        if self.rollback_budget is not None and self.rollback_budget < 0:
            raise ConfigError("rollback_budget must be >= 0")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.alpha_max <= 0:
            raise ConfigError("alpha_max must be positive")
        if self.vprev_policy not in ("redecoded", "original"):
            raise ConfigError(f"unknown vprev_policy {self.vprev_policy!r}")


@dataclass
class RollbackEvent:
    step: int
    c_t: float
    H_t: float
    delta_index: int
    alpha: float
    position_fraction: float = 0.0
    depth: int = 1
    injection_ratio: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GenerationTrace:
    problem_id: str
    mode: str
    tokens: list[int]
    decisions: list[GateDecision]
    events: list[RollbackEvent]
    token_cost: int
    answer: int | None = None
    correct: bool | None = None
    truncated: bool = False
    metadata: dict = field(default_factory=dict)
    # steps (1-based) where the simulator flagged an uncorrected error
    error_steps: list[int] = field(default_factory=list)
    votes: dict | None = None
    rollback_checks: int = 0
    # pre-injection l_crit hiddens per emitted token; kept in memory only
    hiddens: list[np.ndarray] | None = None

    @property
    def final_length(self) -> int:
        return len(self.tokens)

    @property
    def n_rollbacks(self) -> int:
        return len(self.events)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "problem_id": self.problem_id,
            "mode": self.mode,
            "tokens": list(self.tokens),
            "final_length": self.final_length,
            "token_cost": self.token_cost,
            "answer": self.answer,
            "correct": self.correct,
            "truncated": self.truncated,
            "metadata": self.metadata,
            "error_steps": self.error_steps,
            "votes": self.votes,
            "rollback_checks": self.rollback_checks,
            "decisions": [dcs.to_dict() for dcs in self.decisions],
            "events": [ev.to_dict() for ev in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationTrace":
        ver = d.get("schema_version")
        if ver != SCHEMA_VERSION:
            raise ValueError(f"trace schema_version {ver!r} != {SCHEMA_VERSION}")
        votes = d.get("votes")
        if votes is not None:
            votes = {int(k): v for k, v in votes.items()}
        return cls(
            problem_id=d["problem_id"], mode=d["mode"], tokens=list(d["tokens"]),
            decisions=[GateDecision.from_dict(x) for x in d["decisions"]],
            events=[RollbackEvent(**x) for x in d["events"]],
            token_cost=d["token_cost"], answer=d["answer"], correct=d["correct"],
            truncated=d["truncated"], metadata=d.get("metadata", {}),
            error_steps=list(d.get("error_steps", [])), votes=votes,
            rollback_checks=d.get("rollback_checks", 0))


def _check(model, cfg: EngineConfig, basis: SteeringBasis | None):
    if cfg.l_crit >= model.n_layers:
        raise ConfigError(f"l_crit={cfg.l_crit} but the model has {model.n_layers} layers")
    if basis is not None:
        if basis.count == 0:
            raise ConfigError("empty steering basis")
        if basis.d != model.d:
            raise ConfigError(f"basis dimension {basis.d} != model dimension {model.d}")
        if basis.layer != cfg.l_crit and not cfg.allow_layer_mismatch:
            raise ConfigError(f"basis calibrated at layer {basis.layer}, engine monitors {cfg.l_crit}")


def _decode(model, problem: Problem, cfg: EngineConfig, *, basis: SteeringBasis | None = None,
            static_add: np.ndarray | None = None, sampler: Sampler | None = None,
            intervene: bool = False, keep_hiddens: bool = False, mode: str = "greedy"
            ) -> GenerationTrace:
    l = cfg.l_crit
    ep = model.episode(problem, cfg.max_T)
    cache = ep.cache
    base = cache.len
    depth = cfg.rollback_depth
    track_boundaries = intervene and cfg.verify_rollback and depth > 1
    boundaries: list[KvCheckpoint] = []

    tokens: list[int] = []
    hiddens: list[np.ndarray] = []
    vdirs: list[np.ndarray] = []
    flags: list[bool] = []
    decisions: list[GateDecision] = []
    events: list[RollbackEvent] = []
    cost = 0
    checks = 0
    budget = cfg.rollback_budget
    last_event_step = 0
    truncated = False
    v_prev = np.zeros(model.d)
    prev = ep.first_token
    static = None if static_add is None else (l, np.asarray(static_add, dtype=np.float32))

    def emit(out, v_next):
        tokens.append(out.token)
        hiddens.append(out.hidden[l])
        vdirs.append(v_next)
        flags.append(bool(out.error_flag))

    try:
        while len(tokens) < cfg.max_T:
            t = len(tokens) + 1
            if track_boundaries:
                del boundaries[len(tokens):]
                boundaries.append(cache.checkpoint())
            out = ep.step(prev, inject=static, hooks=(l,), lens=(l,), sampler=sampler)
            cost += 1
            h = out.hidden[l]
            v_t = direction_or_zero(h)
            c = float(np.clip(np.dot(v_t, v_prev), -1.0, 1.0)) if v_prev.any() else 0.0
            H = softmax_entropy(out.lens_logits[l])
            dec = authenticate(c, H, cfg.gate, step=t)
            decisions.append(dec)

            fire = (intervene and dec.authenticated and depth > 0 and t > last_event_step
                    and (budget is None or budget > 0))
            if not fire:
                cache.append(out.kv_delta)
                emit(out, v_t)
                v_prev = v_t
                prev = out.token
                if out.token == EOS:
                    break
                continue

            # rollback: discard kv' plus (depth - 1) already-emitted steps
            d_eff = min(depth, len(tokens) + 1)
            keep = len(tokens) - (d_eff - 1)
            if track_boundaries:
                cp = boundaries[keep]
            else:
                cp = cache.checkpoint() if d_eff == 1 else KvCheckpoint(base + keep, cache.digest(base + keep))
            cache.append(out.kv_delta)
            cache.rollback_to(cp)
            checks += 1
            del tokens[keep:], hiddens[keep:], vdirs[keep:], flags[keep:]
            v_prev = vdirs[-1] if vdirs else np.zeros(model.d)
            prev = tokens[-1] if tokens else ep.first_token

            idx, delta = select_delta(basis, h)
            alpha = adaptive_alpha(c, cfg.gate.tau_phi, cfg.alpha_max)
            add = (alpha * delta).astype(np.float32)
            out2 = ep.step(prev, inject=(l, add), hooks=(l,), lens=(l,), sampler=sampler)
            cost += 1
            cache.append(out2.kv_delta)
            if cfg.vprev_policy == "redecoded":
                v_next = direction_or_zero(out2.hidden[l].astype(np.float64) + add)
            else:
                v_next = v_t if d_eff == 1 else direction_or_zero(out2.hidden[l])
            emit(out2, v_next)
            v_prev = v_next
            prev = out2.token
            events.append(RollbackEvent(t, c, H, idx, alpha, depth=d_eff,
                                        injection_ratio=injection_ratio(h, add)))
            last_event_step = t
            if budget is not None:
                budget -= 1
            if out2.token == EOS:
                break
    except GenerationLengthError:
        truncated = True
    if tokens and tokens[-1] != EOS:
        truncated = True

    n = len(tokens)
    for ev in events:
        ev.position_fraction = min(1.0, ev.step / n) if n else 0.0
    answer = extract_answer(tokens)
    correct = None if problem.gold_answer is None else answer == problem.gold_answer
    return GenerationTrace(
        problem_id=problem.id, mode=mode, tokens=tokens, decisions=decisions, events=events,
        token_cost=cost, answer=answer, correct=correct, truncated=truncated,
        metadata=dict(problem.metadata),
        error_steps=[i + 1 for i, f in enumerate(flags) if f],
        rollback_checks=checks, hiddens=hiddens if keep_hiddens else None)


def generate_lpsr(model, problem: Problem, cfg: EngineConfig, basis: SteeringBasis,
                  keep_hiddens: bool = False) -> GenerationTrace:
    """Monitor l_crit, roll back and re-decode with an injected steering vector on
    every authenticated phase shift. Re-decoded tokens are not re-gated."""
    _check(model, cfg, basis)
    return _decode(model, problem, cfg, basis=basis, intervene=True,
                   keep_hiddens=keep_hiddens, mode="lpsr")


def generate_greedy(model, problem: Problem, cfg: EngineConfig,
                    keep_hiddens: bool = False) -> GenerationTrace:
    _check(model, cfg, None)
    return _decode(model, problem, cfg, keep_hiddens=keep_hiddens, mode="greedy")


def generate_static_steer(model, problem: Problem, cfg: EngineConfig, delta,
                          keep_hiddens: bool = False) -> GenerationTrace:
    """Inject ``alpha_max * delta`` at l_crit on every step; no detection-driven action."""
    _check(model, cfg, None)
    add = cfg.alpha_max * np.asarray(delta, dtype=np.float32)
    return _decode(model, problem, cfg, static_add=add, keep_hiddens=keep_hiddens,
                   mode="static_steer")


def majority_vote(answers) -> int | None:
    """Most frequent answer; ties go to whichever tied answer appeared first."""
    answers = list(answers)
    if not answers:
        return None
    counts = Counter(answers)
    top = max(counts.values())
    return next(a for a in answers if counts[a] == top)


def rollout_seed(cfg: EngineConfig, problem_id: str, r: int) -> list[int]:
    return [cfg.seed, zlib.crc32(problem_id.encode()), r]


def generate_best_of_n(model, problem: Problem, cfg: EngineConfig) -> GenerationTrace:
    """``cfg.n`` sampled rollouts and a majority vote over extracted answers.

    Returns the first rollout carrying the winning answer, with ``token_cost``
    summed over all rollouts and the vote tally in ``votes``.
    """
    _check(model, cfg, None)
    rollouts = []
    for r in range(cfg.n):
        sampler = Sampler(np.random.default_rng(rollout_seed(cfg, problem.id, r)), cfg.temperature)
        rollouts.append(_decode(model, problem, cfg, sampler=sampler, mode="best_of_n"))
    winner = majority_vote(tr.answer for tr in rollouts)
    chosen = next(tr for tr in rollouts if tr.answer == winner)
    votes = dict(Counter(tr.answer for tr in rollouts))
    correct = None if problem.gold_answer is None else winner == problem.gold_answer
    return replace(chosen, token_cost=sum(tr.final_length for tr in rollouts),
                   votes=votes, answer=winner, correct=correct)


def static_direction(basis: SteeringBasis) -> np.ndarray:
    """The single fixed vector used for static steering: the normalised basis mean."""
    mean = basis.vectors.astype(np.float64).mean(axis=0)
    if not mean.any():
        return basis.vectors[0].copy()
    return unit_normalize(mean).astype(np.float32)


def generate(model, problem: Problem, cfg: EngineConfig, basis: SteeringBasis | None = None,
             keep_hiddens: bool = False) -> GenerationTrace:
    if cfg.mode == "lpsr":
        if basis is None:
            raise ConfigError("lpsr mode needs a steering basis")
        return generate_lpsr(model, problem, cfg, basis, keep_hiddens)
    if cfg.mode == "static_steer":
        if basis is None:
            raise ConfigError("static_steer mode needs a steering basis")
        return generate_static_steer(model, problem, cfg, static_direction(basis), keep_hiddens)
    if cfg.mode == "best_of_n":
        return generate_best_of_n(model, problem, cfg)
    return generate_greedy(model, problem, cfg, keep_hiddens)


def _run_one(args):
    i, model, problem, cfg, basis = args
    return i, generate(model, problem, cfg, basis)


def collect(indexed) -> list:
    """Order results by problem index, whatever order the workers finished in."""
    return [tr for _, tr in sorted(indexed, key=lambda p: p[0])]


def default_workers() -> int:
    return max(1, int(os.environ.get("LPSR_WORKERS", "1")))


def run_problems(model, problems, cfg: EngineConfig, basis: SteeringBasis | None = None,
                 workers: int | None = None) -> list[GenerationTrace]:
    workers = default_workers() if workers is None else workers
    jobs = [(i, model, p, cfg, basis) for i, p in enumerate(problems)]
    if workers <= 1 or len(jobs) < 2:
        return collect(map(_run_one, jobs))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_one, j) for j in jobs]
        return collect(f.result() for f in as_completed(futures))
