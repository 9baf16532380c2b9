"""Latent phase-shift rollback: detect directional reversals in a decoder's
residual stream and correct them by KV-cache rollback plus steering."""
from .detector import GateConfig, GateDecision, authenticate
from .engine import (EngineConfig, GenerationTrace, RollbackEvent, generate, generate_best_of_n,
                     generate_greedy, generate_lpsr, generate_static_steer)
from .kvcache import KvCache, KvCheckpoint
from .numerics import ConfigError, DomainError, cosine, kmeans, softmax_entropy
from .simulator import SimConfig, Simulator, SimProblemSpec, make_schedule, make_sim_problems
from .steering import SteeringBasis, build_basis, concentration_bound, select_delta
from .toymodel import ModelConfig, ToyTransformer, make_toy_problems

__all__ = [
    "ConfigError", "DomainError", "EngineConfig", "GateConfig", "GateDecision",
    "GenerationTrace", "KvCache", "KvCheckpoint", "ModelConfig", "RollbackEvent", "SimConfig",
    "SimProblemSpec", "Simulator", "SteeringBasis", "ToyTransformer", "authenticate",
    "build_basis", "concentration_bound", "cosine", "generate", "generate_best_of_n",
    "generate_greedy", "generate_lpsr", "generate_static_steer", "kmeans", "make_schedule",
    "make_sim_problems", "make_toy_problems", "select_delta", "softmax_entropy",
]
