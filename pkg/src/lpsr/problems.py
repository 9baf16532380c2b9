"""Problem records, step outputs and sampling shared by both model backends."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

EOS = 0


@dataclass
class Problem:
    id: str
    prompt: tuple[int, ...] = ()
    gold_answer: int | None = None
    # gold solution tokens for teacher forcing (toy transformer only)
    gold_tokens: tuple[int, ...] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)
    # SimSchedule for the simulator backend
    schedule: Any = None


@dataclass
class StepOutput:
    token: int
    hidden: dict[int, np.ndarray]
    logits: np.ndarray
    kv_delta: tuple[np.ndarray, np.ndarray]
    lens_logits: dict[int, np.ndarray] = field(default_factory=dict)
    # simulator ground truth: an uncorrected error happened at this step
    error_flag: bool | None = None


@dataclass
class Sampler:
    """Temperature sampling from a seeded generator; temperature <= 0 means argmax."""

    rng: np.random.Generator
    temperature: float = 1.0

    @property
    def greedy(self) -> bool:
        return self.temperature <= 0

    def pick(self, logits: np.ndarray) -> int:
        if self.greedy:
            return int(np.argmax(logits))
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return int(self.rng.choice(len(p), p=p))


def extract_answer(tokens) -> int | None:
    """The final emitted symbol before EOS (or the last symbol of a truncated run)."""
    toks = list(tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    return int(toks[-1]) if toks else None
