"""LPSR vs greedy vs static steering on a seeded simulator suite.

    python scripts/simulator_efficacy.py --n 500 --k 8
"""
import argparse
from dataclasses import replace

from lpsr.calibration import calibrate
from lpsr.engine import EngineConfig, generate_greedy, generate_lpsr, generate_static_steer, static_direction
from lpsr.evaluation import bootstrap_ci, matched_pairs, mcnemar, rollback_stats, run_summary
from lpsr.simulator import SimConfig, SimProblemSpec, Simulator, make_sim_problems


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--calibration-n", type=int, default=200)
    ap.add_argument("--p-error", type=float, default=0.5)
    ap.add_argument("--p-silent", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()

    sim = Simulator(SimConfig())
    cfg = EngineConfig(l_crit=sim.config.signal_layer)
    cal = make_sim_problems(sim, SimProblemSpec(n=args.calibration_n, seed=1, p_error=1.0))
    basis, report = calibrate(sim, cal, replace(cfg, mode="greedy"), args.k)
    print(f"basis: {basis.count} vectors from {report.n_deltas} deltas, sizes {basis.info['cluster_sizes']}")

    problems = make_sim_problems(sim, SimProblemSpec(n=args.n, seed=args.seed, p_error=args.p_error,
                                                     p_silent=args.p_silent))
    runs = {
        "greedy": [generate_greedy(sim, p, cfg) for p in problems],
        "static_steer": [generate_static_steer(sim, p, cfg, static_direction(basis)) for p in problems],
        "lpsr": [generate_lpsr(sim, p, cfg, basis) for p in problems],
    }
    for name, traces in runs.items():
        s = run_summary(traces)
        lo, hi = bootstrap_ci([t.correct for t in traces], seed=0)
        print(f"{name:13s} acc {s['accuracy']:.3f} [{lo:.3f}, {hi:.3f}]  "
              f"cost {s['mean_token_cost']:.2f}  rollback rate {s['rollback_rate']:.3f}")
    mp = matched_pairs(runs["lpsr"], runs["greedy"])
    m = mcnemar(mp.a_only, mp.b_only)
    print(f"lpsr-only {mp.a_only}, greedy-only {mp.b_only}: chi2 {m.chi2:.2f}, p {m.p_str}")
    rs = rollback_stats(runs["lpsr"])
    print(f"rollback position mean {rs['mean_fraction']:.3f}, by count {rs['accuracy_by_rollback_count']}")


if __name__ == "__main__":
    main()
