"""Command-line entry point: calibrate, run, eval, sweep, export-basis.

Settings come from a JSON RunConfig (``--config``) with individual flags
layered on top. Worker count is read from ``LPSR_WORKERS``. Every failure
exits nonzero: 2 for configuration, format and input errors, 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as runcfg
from .calibration import CalibrationError, calibrate
from .engine import default_workers, run_problems
from .evaluation import (UndefinedMetric, accuracy, bootstrap_ci, fmt, grid_search, layer_sweep,
                         matched_pairs, mcnemar, rollback_stats, run_summary, stratified_accuracy)
from .formats import FormatError, read_basis, read_traces, write_basis, write_csv, write_jsonl, write_traces
from .numerics import ConfigError, DomainError
from .simulator import Simulator, make_sim_problems
from .toymodel import ToyTransformer, make_toy_problems

log = logging.getLogger("lpsr")

SUMMARY_COLUMNS = ["mode", "n", "accuracy", "mean_token_cost", "rollback_rate", "mean_rollbacks"]
EVAL_COLUMNS = ["section", "name", "value"]
EXIT_CONFIG = 2
EXIT_RUNTIME = 1

# flag -> dotted RunConfig path
FLAG_PATHS = {
    "seed": "seed", "backend": "backend", "mode": "engine.mode", "l_crit": "engine.l_crit",
    "tau_phi": "engine.gate.tau_phi", "tau_H": "engine.gate.tau_H",
    "alpha_max": "engine.alpha_max", "max_T": "engine.max_T",
    "rollback_depth": "engine.rollback_depth", "rollback_budget": "engine.rollback_budget",
    "n_problems": "problems.n", "problem_seed": "problems.seed",
    "K": "K", "restarts": "restarts", "basis": "basis_path", "out": "output_dir",
}


# ---------------------------------------------------------------- config plumbing

def _set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {path}: {k} is not an object")
    d[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> runcfg.RunConfig:
    data: dict = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: not valid JSON: {e}") from e
    for flag, path in FLAG_PATHS.items():
        v = getattr(args, flag, None)
        if v is not None:
            _set_path(data, path, v)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(data, k.strip(), _parse_value(v))
    return runcfg.from_dict(data)


def build_backend(cfg: runcfg.RunConfig):
    if cfg.backend == "sim":
        return Simulator(cfg.sim)
    return ToyTransformer(cfg.model)


def build_problems(model, cfg: runcfg.RunConfig, spec):
    if cfg.backend == "sim":
        return make_sim_problems(model, spec)
    return make_toy_problems(model, spec.n, spec.seed, prompt_len=spec.prompt_len,
                             p_solvable=spec.p_solvable, max_T=cfg.engine.max_T)


def _out_dir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _basis_path(cfg) -> Path:
    return Path(cfg.basis_path) if cfg.basis_path else Path(cfg.output_dir) / "basis.lpsb"


def _load_basis(cfg):
    path = _basis_path(cfg)
    if not path.is_file():
        raise ConfigError(f"basis file {path} does not exist (run `lpsr calibrate` first)")
    return read_basis(path)


# ---------------------------------------------------------------- commands

def _calibrate(model, cfg, k: int):
    problems = build_problems(model, cfg, cfg.calibration)
    ecfg = replace(cfg.engine, mode="greedy")
    return calibrate(model, problems, ecfg, k, restarts=cfg.restarts,
                     ortho_threshold=cfg.ortho_threshold, seed=cfg.seed)


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args)
    model = build_backend(cfg)
    basis, report = _calibrate(model, cfg, cfg.K)
    _out_dir(cfg)
    path = _basis_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_basis(path, basis)
    print(f"calibration problems: {report.n_problems}  wrong: {report.n_wrong}  "
          f"deltas: {report.n_deltas}  (no shift: {report.n_no_shift}, zero: {report.n_zero_delta})")
    print(f"basis: {basis.count} vectors (K={cfg.K}), layer {basis.layer}, "
          f"inertia {basis.info['inertia']:.6g}")
    print(f"wrote {path}")
    return 0


def _summary_row(mode, traces) -> dict:
    s = run_summary(traces)
    return {"mode": mode, "n": s["n"], "accuracy": s["accuracy"],
            "mean_token_cost": s["mean_token_cost"], "rollback_rate": s["rollback_rate"],
            "mean_rollbacks": s["mean_rollbacks"]}


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    model = build_backend(cfg)
    mode = cfg.engine.mode
    basis = _load_basis(cfg) if mode in ("lpsr", "static_steer") else None
    problems = build_problems(model, cfg, cfg.problems)
    traces = run_problems(model, problems, cfg.engine, basis, default_workers())
    out = _out_dir(cfg)
    write_traces(out / f"traces_{mode}.jsonl", traces)
    row = _summary_row(mode, traces)
    write_csv(out / f"summary_{mode}.csv", SUMMARY_COLUMNS, [row])
    print("  ".join(f"{c}={fmt(row[c])}" for c in SUMMARY_COLUMNS))
    if mode == "lpsr":
        rs = rollback_stats(traces)
        print(f"rollback position: mean {fmt(rs['mean_fraction'])}, "
              f"median {fmt(rs['median_fraction'])}, events {rs['n_events']}")
    print(f"wrote {out / f'traces_{mode}.jsonl'}")
    return 0


def eval_rows(traces_a, traces_b, *, resamples: int = 10_000, seed: int = 0,
              key: str = "difficulty") -> list[dict]:
    pairs = matched_pairs(traces_a, traces_b)
    rows = [{"section": "pairs", "name": n, "value": getattr(pairs, n)}
            for n in ("both_correct", "a_only", "b_only", "both_wrong")]
    try:
        m = mcnemar(pairs.a_only, pairs.b_only)
        rows += [{"section": "mcnemar", "name": "chi2", "value": m.chi2},
                 {"section": "mcnemar", "name": "p", "value": m.p_str}]
    except UndefinedMetric:
        rows += [{"section": "mcnemar", "name": "chi2", "value": None},
                 {"section": "mcnemar", "name": "p", "value": None}]
    for tag, traces in (("a", traces_a), ("b", traces_b)):
        lo, hi = bootstrap_ci([bool(t.correct) for t in traces], resamples, seed=seed)
        rows += [{"section": f"method_{tag}", "name": "accuracy", "value": accuracy(traces)},
                 {"section": f"method_{tag}", "name": "ci_lo", "value": lo},
                 {"section": f"method_{tag}", "name": "ci_hi", "value": hi}]
        for level, (acc, n) in stratified_accuracy(traces, key).items():
            rows.append({"section": f"method_{tag}_by_{key}", "name": str(level), "value": acc})
    return rows


def cmd_eval(args) -> int:
    a = read_traces(args.traces_a)
    b = read_traces(args.traces_b)
    rows = eval_rows(a, b, resamples=args.resamples, seed=args.seed, key=args.key)
    if args.csv:
        write_csv(args.csv, EVAL_COLUMNS, rows)
    width = max(len(f"{r['section']}.{r['name']}") for r in rows)
    for r in rows:
        print(f"{(r['section'] + '.' + r['name']).ljust(width)}  {fmt(r['value'])}")
    return 0


def sweep_records(model, cfg, axis: str):
    out = Path(cfg.output_dir)
    if axis == "layers":
        problems = build_problems(model, cfg, cfg.problems)
        return layer_sweep(model, problems, cfg.engine.gate, cfg.engine.max_T).records
    if axis == "hparams":
        problems = build_problems(model, cfg, cfg.problems)
        return grid_search(model, problems, cfg.grid, _load_basis(cfg), cfg.engine).records
    if axis == "rollback_depth":
        basis = _load_basis(cfg)
        problems = build_problems(model, cfg, cfg.problems)
        rows = []
        for depth in sorted(set(cfg.depth_values)):
            ecfg = replace(cfg.engine, mode="lpsr", rollback_depth=depth)
            traces = run_problems(model, problems, ecfg, basis, default_workers())
            rows.append({"rollback_depth": depth, **run_summary(traces)})
        return rows
    if axis == "basis_k":
        problems = build_problems(model, cfg, cfg.problems)
        rows = []
        for k in sorted(set(cfg.k_values)):
            basis, report = _calibrate(model, cfg, k)
            write_basis(out / f"basis_K{k}.lpsb", basis)
            ecfg = replace(cfg.engine, mode="lpsr")
            traces = run_problems(model, problems, ecfg, basis, default_workers())
            rows.append({"K": k, "basis_count": basis.count, "inertia": basis.info["inertia"],
                         "n_deltas": report.n_deltas, **run_summary(traces)})
        return rows
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    model = build_backend(cfg)
    out = _out_dir(cfg)
    rows = sweep_records(model, cfg, args.axis)
    cols = list(rows[0]) if rows else []
    write_csv(out / f"sweep_{args.axis}.csv", cols, rows)
    write_jsonl(out / f"sweep_{args.axis}.jsonl", rows)
    print(f"{len(rows)} rows -> {out / f'sweep_{args.axis}.csv'}")
    return 0


def basis_analysis(basis) -> tuple[list[str], list[dict]]:
    v = basis.vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (v / safe[:, None]) @ (v / safe[:, None]).T
    cols = ["index", "norm"] + [f"cos_{j}" for j in range(basis.count)]
    rows = [{"index": i, "norm": float(norms[i]), **{f"cos_{j}": float(cos[i, j]) for j in range(basis.count)}}
            for i in range(basis.count)]
    return cols, rows


def cmd_export_basis(args) -> int:
    basis = read_basis(args.basis)
    cols, rows = basis_analysis(basis)
    out = Path(args.out) if args.out else Path(args.basis).with_suffix(".cosines.csv")
    write_csv(out, cols, rows)
    if args.vectors:
        vcols = ["index"] + [f"x_{j}" for j in range(basis.d)]
        vrows = [{"index": i, **{f"x_{j}": float(x) for j, x in enumerate(vec)}}
                 for i, vec in enumerate(basis.vectors)]
        write_csv(args.vectors, vcols, vrows)
    print(f"{basis.count} vectors, d={basis.d}, layer {basis.layer} -> {out}")
    return 0


# ---------------------------------------------------------------- argparse

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON; flags below override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=runcfg.BACKENDS)
    p.add_argument("--mode", choices=("lpsr", "greedy", "static_steer", "best_of_n"))
    p.add_argument("--l-crit", dest="l_crit", type=int)
    p.add_argument("--tau-phi", dest="tau_phi", type=float)
    p.add_argument("--tau-h", dest="tau_H", type=float)
    p.add_argument("--alpha-max", dest="alpha_max", type=float)
    p.add_argument("--max-t", dest="max_T", type=int)
    p.add_argument("--rollback-depth", dest="rollback_depth", type=int)
    p.add_argument("--rollback-budget", dest="rollback_budget", type=int)
    p.add_argument("--n-problems", dest="n_problems", type=int)
    p.add_argument("--problem-seed", dest="problem_seed", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--basis", help="basis file path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override any config field, e.g. sim.n_modes=4 (value parsed as JSON)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lpsr", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="build a steering basis from wrong greedy runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="generate on a problem set and write traces")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="matched-pair comparison of two trace files")
    p.add_argument("traces_a")
    p.add_argument("traces_b")
    p.add_argument("--csv", help="write the report as CSV")
    p.add_argument("--resamples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--key", default="difficulty", help="metadata tag to stratify by")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="layer, grid, basis-size or rollback-depth sweep")
    p.add_argument("--axis", required=True, choices=("layers", "hparams", "basis_k", "rollback_depth"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-basis", help="pairwise-cosine matrix and norms of a basis file")
    p.add_argument("basis")
    p.add_argument("--out", help="cosine CSV path (default: next to the basis)")
    p.add_argument("--vectors", help="also write the raw vectors as CSV")
    p.set_defaults(func=cmd_export_basis)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, DomainError, UndefinedMetric) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as e:
        print(f"error: bad input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
