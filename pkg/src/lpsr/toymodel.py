"""A tiny deterministic pre-norm transformer decoder with residual-stream hooks.

This is the mechanics backend: it has a real KV cache, real attention and a
real residual stream, so rollback and injection can be checked bit-for-bit.
Weights are random (never trained), which is all those checks need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvcache import GenerationLengthError, KvCache
from .numerics import ConfigError, DomainError
from .problems import EOS, Problem, Sampler, StepOutput, extract_answer

_EPS = np.float32(1e-6)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d: int = 64
    heads: int = 4
    vocab: int = 64
    seed: int = 0
    max_T: int = 128
    max_prompt: int = 32
    mlp_mult: int = 4
    # False makes the final normalisation the identity (used by linear-response checks)
    final_norm: bool = True

    def __post_init__(self):
        for name in ("n_layers", "d", "heads", "vocab", "max_T", "max_prompt", "mlp_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.vocab < 2:
            raise ConfigError("vocab needs at least EOS plus one symbol")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def _rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + _EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(
        np.float32(0.7978845608) * (x + np.float32(0.044715) * x ** 3)))


class ToyTransformer:
    def __init__(self, config: ModelConfig):
        self.config = c = config
        rng = np.random.default_rng(c.seed)

        def mat(*shape, scale):
            return (rng.standard_normal(shape) * scale).astype(np.float32)

        n_pos = c.max_prompt + c.max_T
        self.embed = mat(c.vocab, c.d, scale=1.0)
        self.pos = mat(n_pos, c.d, scale=0.5)
        s = 1.0 / np.sqrt(c.d)
        self.wq = mat(c.n_layers, c.d, c.d, scale=s)
        self.wk = mat(c.n_layers, c.d, c.d, scale=s)
        self.wv = mat(c.n_layers, c.d, c.d, scale=s)
        self.wo = mat(c.n_layers, c.d, c.d, scale=s)
        h = c.mlp_mult * c.d
        self.w1 = mat(c.n_layers, c.d, h, scale=s)
        self.w2 = mat(c.n_layers, h, c.d, scale=1.0 / np.sqrt(h))
        self.unembed = mat(c.vocab, c.d, scale=s)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def new_cache(self, capacity: int | None = None) -> KvCache:
        c = self.config
        return KvCache(c.n_layers, capacity or (c.max_prompt + c.max_T), c.heads, c.head_dim)

    def final_hidden_to_logits(self, x: np.ndarray) -> np.ndarray:
        if self.config.final_norm:
            x = _rms(x)
        return (self.unembed @ x).astype(np.float32)

    def lens_logits(self, h: np.ndarray) -> np.ndarray:
        """Logit lens: final normalisation then unembedding applied to a mid-layer state."""
        return self.final_hidden_to_logits(np.asarray(h, dtype=np.float32))

    def _forward(self, cache: KvCache, prev_token: int, inject=None, hooks=None,
                 lens=(), sampler: Sampler | None = None) -> StepOutput:
        c = self.config
        if not 0 <= prev_token < c.vocab:
            raise DomainError(f"token {prev_token} outside vocab of {c.vocab}")
        pos = cache.len
        if pos >= cache.capacity or pos >= len(self.pos):
            raise GenerationLengthError(f"no room for position {pos}")
        hooked = range(c.n_layers) if hooks is None else hooks
        x = self.embed[prev_token] + self.pos[pos]
        hd, nh = c.head_dim, c.heads
        keys = np.empty((c.n_layers, nh, hd), np.float32)
        vals = np.empty((c.n_layers, nh, hd), np.float32)
        hidden: dict[int, np.ndarray] = {}
        scale = np.float32(1.0 / np.sqrt(hd))
        for layer in range(c.n_layers):
            a = _rms(x)
            q = (a @ self.wq[layer]).reshape(nh, hd)
            k = (a @ self.wk[layer]).reshape(nh, hd)
            v = (a @ self.wv[layer]).reshape(nh, hd)
            keys[layer], vals[layer] = k, v
            kk = np.concatenate([cache.live_keys(layer), k[None]], axis=0)
            vv = np.concatenate([cache.live_values(layer), v[None]], axis=0)
            scores = np.einsum("hd,thd->ht", q, kk) * scale
            scores -= scores.max(axis=1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=1, keepdims=True)
            att = np.einsum("ht,thd->hd", w, vv).reshape(c.d)
            x = x + att @ self.wo[layer]
            x = x + _gelu(_rms(x) @ self.w1[layer]) @ self.w2[layer]
            if layer in hooked:
                hidden[layer] = x.copy()
            if inject is not None and inject[0] == layer and np.any(inject[1]):
                x = x + np.asarray(inject[1], dtype=np.float32)
        logits = self.final_hidden_to_logits(x)
        token = int(np.argmax(logits)) if sampler is None else sampler.pick(logits)
        lens_out = {layer: self.lens_logits(hidden[layer]) for layer in lens}
        return StepOutput(token, hidden, logits, (keys, vals), lens_out)

    def step(self, cache: KvCache, prev_token: int, *, hooks=None, lens=(),
             sampler: Sampler | None = None) -> StepOutput:
        """One decode step reading (not mutating) ``cache``; append ``kv_delta`` to advance."""
        return self._forward(cache, prev_token, None, hooks, lens, sampler)

    def step_with_injection(self, cache: KvCache, prev_token: int, layer: int, add, *,
                            hooks=None, lens=(), sampler: Sampler | None = None) -> StepOutput:
        """As :meth:`step`, with ``add`` summed into the output of block ``layer``.

        Reported hiddens are captured before the injection.
        """
        if not 0 <= layer < self.n_layers:
            raise DomainError(f"layer {layer} out of range")
        return self._forward(cache, prev_token, (layer, add), hooks, lens, sampler)

    def prefill(self, cache: KvCache, prompt) -> int:
        """Encode all but the last prompt token; returns the token to feed next."""
        prompt = list(prompt) or [EOS]
        if len(prompt) > self.config.max_prompt:
            raise DomainError(f"prompt longer than max_prompt={self.config.max_prompt}")
        for tok in prompt[:-1]:
            cache.append(self.step(cache, tok, hooks=()).kv_delta)
        return int(prompt[-1])

    def teacher_forced_hiddens(self, tokens, layer: int, prompt=()) -> list[np.ndarray]:
        """Hidden at ``layer`` for each forced token, using the same hook semantics as step."""
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise DomainError("empty token sequence")
        if any(not 0 <= t < self.vocab for t in tokens):
            raise DomainError("token outside vocab")
        cache = self.new_cache()
        prev = self.prefill(cache, prompt)
        out = []
        for tok in tokens:
            so = self.step(cache, prev, hooks=(layer,))
            out.append(so.hidden[layer])
            cache.append(so.kv_delta)
            prev = tok
        return out

    def episode(self, problem: Problem, max_T: int) -> "ToyEpisode":
        return ToyEpisode(self, problem, max_T)


class ToyEpisode:
    """Per-problem decoding state: a prefilled cache plus the token to feed next."""

    def __init__(self, model: ToyTransformer, problem: Problem, max_T: int):
        self.model = model
        self.problem = problem
        self.cache = model.new_cache(max(1, len(problem.prompt)) - 1 + max_T)
        self.first_token = model.prefill(self.cache, problem.prompt)

    def step(self, prev_token: int, *, inject=None, hooks=None, lens=(),
             sampler: Sampler | None = None) -> StepOutput:
        if inject is None:
            return self.model.step(self.cache, prev_token, hooks=hooks, lens=lens, sampler=sampler)
        layer, add = inject
        return self.model.step_with_injection(self.cache, prev_token, layer, add,
                                              hooks=hooks, lens=lens, sampler=sampler)

    def oracle_hiddens(self, layer: int) -> list[np.ndarray]:
        gold = self.problem.gold_tokens
        if not gold:
            raise DomainError(f"problem {self.problem.id} has no gold tokens")
        return self.model.teacher_forced_hiddens(gold, layer, self.problem.prompt)


def greedy_tokens(model: ToyTransformer, prompt, max_T: int) -> list[int]:
    ep = ToyEpisode(model, Problem("tmp", tuple(prompt)), max_T)
    prev, out = ep.first_token, []
    while len(out) < max_T:
        so = ep.step(prev, hooks=())
        ep.cache.append(so.kv_delta)
        out.append(so.token)
        prev = so.token
        if so.token == EOS:
            break
    return out


def make_toy_problems(model: ToyTransformer, n: int, seed: int, *, prompt_len: int = 4,
                      p_solvable: float = 0.5, max_T: int | None = None) -> list[Problem]:
    """Random prompts with gold solutions.

    Solvable problems take the model's own greedy continuation as gold; the rest
    share a random-length prefix with it and then diverge to a different answer.
    """
    max_T = max_T or model.config.max_T
    rng = np.random.default_rng([seed, 0x70F])
    V = model.vocab
    problems = []
    for i in range(n):
        prompt = tuple(int(t) for t in rng.integers(1, V, size=prompt_len))
        greedy = greedy_tokens(model, prompt, max_T)
        # an immediate EOS has no answer to copy, so that prompt is never solvable
        solvable = bool(rng.random() < p_solvable) and extract_answer(greedy) is not None
        if solvable:
            gold = list(greedy)
        else:
            body = [t for t in greedy if t != EOS]
            j = int(rng.integers(0, max(1, len(body) // 2)))
            m = max(2, len(body) - j)
            m = min(m, max_T - 1 - j)
            tail = [int(t) for t in rng.integers(1, V, size=m)]
            gold = body[:j] + tail
            while gold[-1] == extract_answer(greedy):
                gold[-1] = int(rng.integers(1, V))
            gold.append(EOS)
        problems.append(Problem(
            id=f"toy-{seed}-{i}", prompt=prompt, gold_answer=extract_answer(gold),
            gold_tokens=tuple(gold),
            metadata={"difficulty": int(rng.integers(1, 6)), "solvable": solvable}))
    return problems
