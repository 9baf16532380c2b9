"""Basis calibration: greedy runs, oracle trajectories, deltas, k-means."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .engine import EngineConfig, generate_greedy
from .steering import CorrectionDelta, SteeringBasis, build_basis, extract_delta

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibrationReport:
    n_problems: int
    n_wrong: int
    n_deltas: int
    n_no_shift: int
    n_zero_delta: int


def oracle_hiddens(model, problem, layer: int, max_T: int):
    """Teacher-forced trajectory on the transformer; schedule-defined on the simulator."""
    return model.episode(problem, max_T).oracle_hiddens(layer)


def collect_deltas(model, problems, cfg: EngineConfig) -> tuple[list[CorrectionDelta], CalibrationReport]:
    deltas, n_wrong, no_shift, zero = [], 0, 0, 0
    for prob in problems:
        tr = generate_greedy(model, prob, cfg, keep_hiddens=True)
        if tr.correct is not False:
            continue
        n_wrong += 1
        right = oracle_hiddens(model, prob, cfg.l_crit, cfg.max_T)
        d = extract_delta(tr.hiddens, right, cfg.gate.tau_phi, prob.id)
        if d is None:
            no_shift += 1
        elif not d.delta.any():
            # shift before the trajectories diverge: nothing to learn from
            zero += 1
        else:
            deltas.append(d)
    if zero:
        log.info("%d wrong trajectories had a zero delta at their first phase shift", zero)
    return deltas, CalibrationReport(len(problems), n_wrong, len(deltas), no_shift, zero)


def calibrate(model, problems, cfg: EngineConfig, k: int, *, restarts: int = 20,
              ortho_threshold: float = 0.95, seed: int = 0
              ) -> tuple[SteeringBasis, CalibrationReport]:
    deltas, report = collect_deltas(model, problems, cfg)
    if not deltas:
        raise CalibrationError(
            f"no correction deltas: {report.n_wrong} wrong of {report.n_problems} problems, "
            f"{report.n_no_shift} without a phase shift below -{cfg.gate.tau_phi}, "
            f"{report.n_zero_delta} with zero delta")
    basis = build_basis(deltas, k, restarts=restarts, ortho_threshold=ortho_threshold,
                        seed=seed, layer=cfg.l_crit, tau_phi=cfg.gate.tau_phi)
    return basis, report
