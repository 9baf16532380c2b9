"""Dual-gate phase-shift authentication: a cosine reversal plus a logit-lens entropy gate."""
from __future__ import annotations

from dataclasses import dataclass

from .numerics import ConfigError, DomainError


@dataclass(frozen=True)
class GateConfig:
    tau_phi: float = 0.6
    tau_H: float = 2.5  # 0 disables the entropy gate

    def __post_init__(self):
        if not 0.0 < self.tau_phi < 1.0:
            raise ConfigError(f"tau_phi must lie in (0, 1), got {self.tau_phi}")
        if self.tau_H < 0:
            raise ConfigError(f"tau_H must be >= 0, got {self.tau_H}")


@dataclass(frozen=True)
class GateDecision:
    c_t: float
    H_t: float
    authenticated: bool
    step: int

    def to_dict(self) -> dict:
        return {"step": self.step, "c_t": self.c_t, "H_t": self.H_t,
                "authenticated": self.authenticated}

    @classmethod
    def from_dict(cls, d: dict) -> "GateDecision":
        return cls(d["c_t"], d["H_t"], d["authenticated"], d["step"])


def cosine_gate(c: float, cfg: GateConfig) -> bool:
    return c < -cfg.tau_phi


def entropy_gate(H: float, cfg: GateConfig) -> bool:
    # tau_H = 0 switches the gate off, zero-entropy steps included
    return cfg.tau_H == 0 or H > cfg.tau_H


def authenticate(c: float, H: float, cfg: GateConfig, step: int = 0) -> GateDecision:
    """Both gates, strict inequalities: ``c < -tau_phi and H > tau_H``."""
    if not -1.0 <= c <= 1.0:
        raise DomainError(f"cosine {c} outside [-1, 1]")
    if H < 0:
        raise DomainError(f"entropy {H} is negative")
    return GateDecision(float(c), float(H), cosine_gate(c, cfg) and entropy_gate(H, cfg), step)


def detection_score(cosines) -> float:
    """Minimum per-step cosine over a generation; lower means a stronger error signal."""
    cs = list(cosines)
    if not cs:
        raise DomainError("empty cosine trace")
    return float(min(cs))
