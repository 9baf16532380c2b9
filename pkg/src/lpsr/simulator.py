"""Synthetic residual-stream trajectories with ground-truth error labels.

The statistics backend. Every layer's hidden direction performs a small-angle
random walk on the sphere. At the signal layer, scheduled events bend it:

* ``error_onset``: the direction reflects (cosine ``reflect_cos`` with the
  previous step) towards the error's mode axis and the logits flatten. The
  problem's answer goes wrong unless a steering vector aligned with that
  mode axis was injected at the signal layer at this step (or primed a few
  steps before; priming decays by ``carry`` per step).
* ``benign``: same kind of reflection but no error. Injecting into a benign
  step corrupts the answer with probability ``harm_prob``.
* ``silent_error``: the answer goes wrong with no geometric signature.

Walk state (per-layer directions, error count, primed steering vector) is
stored in the KV cache, so cache rollback rewinds the simulator too, and all
randomness is keyed on ``(schedule seed, position)`` so replays are exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kvcache import GenerationLengthError, KvCache
from .numerics import ConfigError, DomainError, cosine, norm
from .problems import EOS, Problem, Sampler, StepOutput

NOMINAL = "nominal"
ERROR_ONSET = "error_onset"
POST_ERROR = "post_error"
BENIGN = "benign"
SILENT_ERROR = "silent_error"
REGIMES = (NOMINAL, ERROR_ONSET, POST_ERROR, BENIGN, SILENT_ERROR)
ERROR_REGIMES = (ERROR_ONSET, SILENT_ERROR)

_LOGIT_FLOOR = -1e4


@dataclass(frozen=True)
class SimConfig:
    n_layers: int = 8
    d: int = 64
    vocab: int = 64
    signal_layer: int = 4
    n_modes: int = 8
    radius: float = 4.0
    radius_noise: float = 0.02
    correct_threshold: float = 0.5
    min_strength: float = 0.03
    carry: float = 0.6
    harm_prob: float = 0.5
    escape_prob: float = 0.3
    oracle_offset: float = 1.0
    oracle_noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.vocab, self.n_modes) < 1 or self.n_layers < 2:
            raise ConfigError("simulator geometry must be positive, with at least 2 layers")
        if not 0 <= self.signal_layer < self.n_layers:
            raise ConfigError(f"signal_layer {self.signal_layer} outside [0, {self.n_layers})")
        if self.n_modes > self.d:
            raise ConfigError("n_modes cannot exceed d (modes are orthonormal)")
        if self.vocab < 4:
            raise ConfigError("vocab too small for answers plus EOS")


@dataclass
class SimSchedule:
    """Ground-truth script for one problem; positions are 0-based, steps 1-based."""

    seed: int
    labels: list[str]
    modes: list[int]
    cosines: list[float]  # target reflection cosine at reflecting steps, else nan
    support: list[int]  # entropy support size per step: H = ln(support)
    tokens: list[int]
    alt_tokens: list[int]
    gold_answer: int
    wrong_answers: tuple[int, ...]
    drift_deg: dict[str, float] = field(default_factory=lambda: {r: 5.0 for r in REGIMES})
    noise: float = 0.02
    nominal_support: int = 4

    def __post_init__(self):
        n = len(self.labels)
        if n < 2:
            raise DomainError("schedule needs at least an answer and EOS step")
        for name in ("modes", "cosines", "support", "tokens", "alt_tokens"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"schedule field {name} has wrong length")
        bad = set(self.labels) - set(REGIMES)
        if bad:
            raise DomainError(f"unknown regime labels {bad}")

    @property
    def length(self) -> int:
        return len(self.labels)

    def onset_steps(self) -> list[int]:
        return [p + 1 for p, lab in enumerate(self.labels) if lab in ERROR_REGIMES]

    def has_error(self) -> bool:
        return any(lab in ERROR_REGIMES for lab in self.labels)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "labels": self.labels, "modes": self.modes,
                "cosines": [None if math.isnan(c) else c for c in self.cosines],
                "support": self.support, "tokens": self.tokens, "alt_tokens": self.alt_tokens,
                "gold_answer": self.gold_answer, "wrong_answers": list(self.wrong_answers),
                "drift_deg": self.drift_deg, "noise": self.noise,
                "nominal_support": self.nominal_support}

    @classmethod
    def from_dict(cls, d: dict) -> "SimSchedule":
        d = dict(d)
        d["cosines"] = [math.nan if c is None else c for c in d["cosines"]]
        d["wrong_answers"] = tuple(d["wrong_answers"])
        return cls(**d)


def make_schedule(sim: "Simulator", seed: int, length: int, *, onsets=(), benign=(),
                  silent=(), reflect_cos: float = -0.8, benign_cos: float = -0.8,
                  onset_support: int | None = None, benign_support: int = 2,
                  nominal_support: int = 4, drift_deg: float = 5.0,
                  noise: float | None = None) -> SimSchedule:
    """Build a schedule of ``length`` steps (answer at ``length-1``, EOS at ``length``).

    ``onsets`` holds ``(step, mode)`` pairs; ``benign`` and ``silent`` hold steps.
    Steps are 1-based and must fall before the answer step.
    """
    cfg = sim.config
    V = cfg.vocab
    if length < 3:
        raise DomainError("schedule length must be at least 3")
    rng = np.random.default_rng([seed, 0x5C4E])
    labels = [NOMINAL] * length
    modes = [-1] * length
    cosines = [math.nan] * length
    support = [nominal_support] * length
    onset_support = V if onset_support is None else onset_support
    events: list[tuple[int, str, int, float, int]] = (
        [(t, ERROR_ONSET, m, reflect_cos, onset_support) for t, m in onsets]
        + [(t, BENIGN, -1, benign_cos, benign_support) for t in benign]
        + [(t, SILENT_ERROR, int(rng.integers(cfg.n_modes)), math.nan, nominal_support)
           for t in silent])
    for t, lab, mode, c, sup in events:
        if not 1 <= t <= length - 2:
            raise DomainError(f"event step {t} must lie in [1, {length - 2}]")
        p = t - 1
        if labels[p] != NOMINAL:
            raise DomainError(f"two events scheduled at step {t}")
        if lab == ERROR_ONSET and not 0 <= mode < cfg.n_modes:
            raise DomainError(f"mode {mode} outside [0, {cfg.n_modes})")
        labels[p], modes[p], cosines[p], support[p] = lab, mode, c, sup
    first_err = min((t for t, lab, *_ in events if lab in ERROR_REGIMES), default=None)
    if first_err is not None:
        for p in range(first_err, length):
            if labels[p] == NOMINAL:
                labels[p] = POST_ERROR
    for s in support:
        if not 1 <= s <= V:
            raise DomainError(f"entropy support {s} outside [1, {V}]")
    tokens = [int(t) for t in rng.integers(1, V, size=length)]
    alt = [int(t) for t in rng.integers(1, V, size=length)]
    answers = rng.choice(np.arange(1, V), size=4, replace=False)
    gold, wrong = int(answers[0]), tuple(int(a) for a in answers[1:])
    tokens[-2], tokens[-1] = gold, EOS
    alt[-2], alt[-1] = wrong[0], EOS
    return SimSchedule(seed, labels, modes, cosines, support, tokens, alt, gold, wrong,
                       {r: drift_deg for r in REGIMES},
                       cfg.radius_noise if noise is None else noise, nominal_support)


class Simulator:
    def __init__(self, config: SimConfig):
        self.config = c = config
        rng = np.random.default_rng([c.seed, 0x3A0D])
        q, _ = np.linalg.qr(rng.standard_normal((c.d, c.n_modes)))
        self.modes = q.T.copy()  # (n_modes, d), orthonormal rows

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def episode(self, problem: Problem, max_T: int) -> "SimEpisode":
        return SimEpisode(self, problem, max_T)

    def _logits(self, token: int, support: int) -> np.ndarray:
        V = self.config.vocab
        out = np.full(V, _LOGIT_FLOOR, dtype=np.float32)
        idx = (token + np.arange(support)) % V
        out[idx] = 0.0
        return out

    def step_at(self, schedule: SimSchedule, cache: KvCache, *, inject=None, hooks=None,
                lens=(), sampler: Sampler | None = None) -> StepOutput:
        cfg = self.config
        p = cache.len
        if p >= schedule.length:
            raise DomainError(f"step {p + 1} beyond schedule of length {schedule.length}")
        if p >= cache.capacity:
            raise GenerationLengthError(f"cache full at {cache.capacity}")
        L, d, S = cfg.n_layers, cfg.d, cfg.signal_layer
        rng = np.random.default_rng([schedule.seed, p, 0xD1F7])
        gauss = rng.standard_normal((L + 1, d))
        angle_u = rng.random(L)
        rad_noise = rng.standard_normal(L)
        u_avert, u_harm, u_escape, u_wrong = rng.random(4)

        if p == 0:
            init = np.random.default_rng([schedule.seed, 0x1217]).standard_normal((L, d))
            prev_dirs = init / np.linalg.norm(init, axis=1, keepdims=True)
            errs, primed, primed_step = 0, np.zeros(d), -1.0
        else:
            prev_dirs = cache.keys[:, p - 1, 0, :].astype(np.float64)
            primed = cache.values[0, p - 1, 0, :].astype(np.float64)
            errs = int(cache.values[1, p - 1, 0, 0])
            primed_step = float(cache.values[1, p - 1, 0, 1])

        label = schedule.labels[p]
        drift = math.radians(schedule.drift_deg.get(label, 5.0))
        dirs = np.empty((L, d))
        for layer in range(L):
            u = prev_dirs[layer]
            w = gauss[layer] - np.dot(gauss[layer], u) * u
            w /= norm(w)
            th = drift * angle_u[layer]
            dirs[layer] = math.cos(th) * u + math.sin(th) * w

        add_S = None
        if inject is not None and inject[0] == S and norm(inject[1]) > 0:
            add_S = np.asarray(inject[1], dtype=np.float64)
        if add_S is not None:
            primed, primed_step = add_S, float(p)

        def reflect(axis):
            u = prev_dirs[S]
            g = axis - np.dot(axis, u) * u
            g /= norm(g)
            c = schedule.cosines[p]
            return c * u + math.sqrt(max(0.0, 1.0 - c * c)) * g

        error_flag = False
        support = schedule.support[p]
        escaped = sampler is not None and not sampler.greedy and u_escape < cfg.escape_prob
        if label == ERROR_ONSET:
            g = self.modes[schedule.modes[p]]
            averted = escaped
            if not averted and primed_step >= 0 and norm(primed) >= cfg.min_strength:
                dist = p - primed_step
                aligned = cosine(primed, g) >= cfg.correct_threshold
                averted = aligned and u_avert < cfg.carry ** dist
            if averted:
                support = schedule.nominal_support
            else:
                dirs[S] = reflect(g)
                errs += 1
                error_flag = True
        elif label == SILENT_ERROR:
            if not escaped:
                errs += 1
                error_flag = True
        elif label == BENIGN:
            axis = gauss[L] / norm(gauss[L])
            dirs[S] = reflect(axis)
            if add_S is not None and norm(add_S) >= cfg.min_strength and u_harm < cfg.harm_prob:
                errs += 1
                error_flag = True

        if p == schedule.length - 1:
            token = EOS
        elif p == schedule.length - 2:
            if errs == 0:
                token = schedule.gold_answer
            elif sampler is not None and not sampler.greedy:
                token = schedule.wrong_answers[int(u_wrong * len(schedule.wrong_answers))]
            else:
                token = schedule.wrong_answers[0]
        else:
            token = schedule.tokens[p] if errs == 0 else schedule.alt_tokens[p]

        radii = cfg.radius * (1.0 + schedule.noise * rad_noise)
        hidden_all = (radii[:, None] * dirs).astype(np.float32)
        stored = hidden_all.astype(np.float64)
        if inject is not None:
            layer, add = inject
            stored[layer] = stored[layer] + np.asarray(add, dtype=np.float64)
        stored_dirs = stored / np.linalg.norm(stored, axis=1, keepdims=True)

        keys = np.zeros((L, 1, d), np.float32)
        vals = np.zeros((L, 1, d), np.float32)
        keys[:, 0, :] = stored_dirs
        vals[0, 0, :] = primed
        vals[1, 0, 0] = errs
        vals[1, 0, 1] = primed_step

        hooked = range(L) if hooks is None else hooks
        hidden = {layer: hidden_all[layer].copy() for layer in hooked}
        logits = self._logits(token, support)
        return StepOutput(token, hidden, logits, (keys, vals),
                          {layer: logits for layer in lens}, error_flag)

    def sim_step(self, schedule: SimSchedule, t: int) -> StepOutput:
        """Greedy, uninjected output at 1-based step ``t`` (replays steps 1..t)."""
        if not 1 <= t <= schedule.length:
            raise DomainError(f"step {t} outside schedule of length {schedule.length}")
        cache = KvCache(self.n_layers, schedule.length, 1, self.d)
        for _ in range(t):
            out = self.step_at(schedule, cache)
            cache.append(out.kv_delta)
        return out

    def oracle_hiddens(self, schedule: SimSchedule, layer: int) -> list[np.ndarray]:
        """Correct-trajectory hiddens: the greedy path, offset along the mode axis at onsets."""
        cfg = self.config
        cache = KvCache(self.n_layers, schedule.length, 1, self.d)
        out = []
        for p in range(schedule.length):
            so = self.step_at(schedule, cache, hooks=(layer,))
            cache.append(so.kv_delta)
            h = so.hidden[layer].astype(np.float64)
            if schedule.labels[p] == ERROR_ONSET and layer == cfg.signal_layer:
                rng = np.random.default_rng([schedule.seed, p, 0x0AC1])
                g = self.modes[schedule.modes[p]]
                h = h + cfg.radius * (cfg.oracle_offset * g
                                      + cfg.oracle_noise * rng.standard_normal(cfg.d) / math.sqrt(cfg.d))
            out.append(h.astype(np.float32))
        return out


class SimEpisode:
    def __init__(self, sim: Simulator, problem: Problem, max_T: int):
        if problem.schedule is None:
            raise DomainError(f"problem {problem.id} has no simulator schedule")
        self.sim = sim
        self.problem = problem
        self.cache = KvCache(sim.n_layers, max(1, max_T), 1, sim.d)
        self.first_token = EOS

    def step(self, prev_token: int, *, inject=None, hooks=None, lens=(),
             sampler: Sampler | None = None) -> StepOutput:
        return self.sim.step_at(self.problem.schedule, self.cache, inject=inject, hooks=hooks,
                                lens=lens, sampler=sampler)

    def oracle_hiddens(self, layer: int) -> list[np.ndarray]:
        return self.sim.oracle_hiddens(self.problem.schedule, layer)


@dataclass(frozen=True)
class SimProblemSpec:
    """How to draw a simulator problem set."""

    n: int = 100
    seed: int = 0
    length_min: int = 24
    length_max: int = 40
    p_error: float = 0.5
    p_silent: float = 0.0
    p_benign: float = 0.0
    reflect_cos: float = -0.8
    benign_cos: float = -0.8
    onset_support: int | None = None
    benign_support: int = 2
    nominal_support: int = 4
    drift_deg: float = 5.0
    # scale error probability with a difficulty tag 1..5 (level 3 = p_error)
    difficulty_slope: float = 0.0


def make_sim_problems(sim: Simulator, spec: SimProblemSpec) -> list[Problem]:
    rng = np.random.default_rng([spec.seed, 0x9B0B])
    out = []
    for i in range(spec.n):
        length = int(rng.integers(spec.length_min, spec.length_max + 1))
        level = int(rng.integers(1, 6))
        p_err = min(1.0, max(0.0, spec.p_error * (1.0 + spec.difficulty_slope * (level - 3))))
        free = list(range(3, length - 2))
        rng.shuffle(free)
        onsets, silent, benign = [], [], []
        if rng.random() < p_err:
            onsets.append((free.pop(), int(rng.integers(sim.config.n_modes))))
        if rng.random() < spec.p_silent:
            silent.append(free.pop())
        if rng.random() < spec.p_benign:
            benign.append(free.pop())
        sched = make_schedule(
            sim, int(rng.integers(2**31)), length, onsets=onsets, benign=benign, silent=silent,
            reflect_cos=spec.reflect_cos, benign_cos=spec.benign_cos,
            onset_support=spec.onset_support, benign_support=spec.benign_support,
            nominal_support=spec.nominal_support, drift_deg=spec.drift_deg)
        out.append(Problem(id=f"sim-{spec.seed}-{i}", gold_answer=sched.gold_answer,
                           metadata={"difficulty": level, "has_error": sched.has_error()},
                           schedule=sched))
    return out
