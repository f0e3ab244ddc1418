"""Command-line entry point: ``tems {run,calibrate,compare,tree-info}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from tems.calibration import calibrate_tightening
from tems.closed_loop import compare_schemes, make_tasks, run_tasks
from tems.config import ConfigError, ExperimentConfig, benchmark_config, load_config
from tems.controllers import ConfigError as ControllerConfigError
from tems.experiment import Experiment, build_experiment, tree_info
from tems.persistence import (
    emit_plot_data,
    write_comparison,
    write_summaries_jsonl,
    write_trace_csv,
)

logger = logging.getLogger("tems")

INCOMPLETE_MARKER = "INCOMPLETE"


def _load(path: str | None) -> tuple[ExperimentConfig, Path | None]:
    if path is None:
        return benchmark_config(), None
    return load_config(path), Path(path).resolve().parent


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    if marker.exists():
        marker.unlink()
    return out


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


def cmd_tree_info(args, exp: Experiment) -> int:
    info = tree_info(exp)
    print(
        f"scenarios: {info['scenarios']}, state nodes: {info['state_nodes']}, "
        f"naive full-branching: {info['naive_full_branching']}"
    )
    return 0


def cmd_run(args, exp: Experiment) -> int:
    cfg = exp.config
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg.master_seed)
    scheme = exp.scheme(args.scheme)
    tasks = make_tasks(
        exp.plant,
        scheme,
        exp.grid(),
        seed,
        cfg.grid.seeds_per_point,
        list(cfg.grid.additive_modes),
        cfg.simulation.violation_tol,
        keep_trace=True,
    )[: args.episodes]
    results = run_tasks(tasks, args.workers)
    h = cfg.config_hash()
    for task, (summary, trace) in zip(tasks, results):
        if trace is None:
            logger.error("episode %d failed: %s", task.episode, summary.message)
            continue
        stem = f"{scheme.name}_ep{task.episode:04d}"
        write_trace_csv(out / "traces" / f"{stem}.csv", trace, exp.model, h, task.seed, args.timings)
        if args.plot:
            emit_plot_data(trace, exp.model, out / "plot" / stem, h, task.seed)
    summaries = [r[0] for r in results]
    write_summaries_jsonl(out / f"summaries_{scheme.name}.jsonl", summaries, h, seed, args.timings)
    for s in summaries:
        print(
            f"episode {s.episode}: params={s.params} status={s.status} steps={s.steps} "
            f"violating_steps={s.violating_steps}"
        )
    return 0 if all(r[1] is not None for r in results) else 1


def cmd_calibrate(args, exp: Experiment) -> int:
    cfg = exp.config
    out = _out_dir(args, cfg)
    t = cfg.tightening
    candidates = [s for s in exp.schemes if s.ancillary is not None]
    scheme = exp.scheme(args.scheme) if args.scheme else (candidates or list(exp.schemes))[0]
    report = calibrate_tightening(
        exp.untightened(scheme),
        exp.plant,
        safety_factor=t.safety_factor,
        master_seed=_seed(args, t.master_seed),
        seeds_per_point=t.seeds_per_point,
        precision=t.precision,
        max_rounds=t.max_rounds,
        workers=args.workers,
        violation_tol=cfg.simulation.violation_tol,
    )
    path = out / "tightening.json"
    path.write_text(report.to_json() + "\n")
    print(f"delta: {report.delta} (rounds: {report.rounds}, verified: {report.verified})")
    print(f"report written to {path}")
    return 0 if report.verified else 1


def cmd_compare(args, exp: Experiment) -> int:
    cfg = exp.config
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg.master_seed)
    table, by_scheme = compare_schemes(
        exp.schemes,
        exp.plant,
        exp.grid(),
        seed,
        seeds_per_point=cfg.grid.seeds_per_point,
        workers=args.workers,
        violation_tol=cfg.simulation.violation_tol,
        additive_modes=list(cfg.grid.additive_modes),
        max_episodes=args.episodes,
    )
    h = cfg.config_hash()
    write_comparison(out, table, h, seed)
    for name, summaries in by_scheme.items():
        write_summaries_jsonl(out / f"summaries_{name}.jsonl", summaries, h, seed)
    print(table.to_text(), end="")
    return 0


COMMANDS = {
    "run": cmd_run,
    "calibrate": cmd_calibrate,
    "compare": cmd_compare,
    "tree-info": cmd_tree_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tems", description="Tube-enhanced multi-stage NMPC experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True, outputs=True):
        p.add_argument("--config", help="experiment JSON (default: shipped benchmark)")
        if seeds:
            p.add_argument("--seed", type=int, help="master seed (default: from the config)")
            p.add_argument("--workers", type=int, help="worker processes (default: $TEMS_WORKERS or 1)")
        if outputs:
            p.add_argument("--out", help="output directory (default: from the config)")

    p = sub.add_parser("run", help="simulate episodes of one scheme and write traces")
    common(p)
    p.add_argument("--episodes", type=int, default=1, help="number of episodes (default: 1)")
    p.add_argument("--scheme", help="scheme label (default: the first)")
    p.add_argument("--timings", action="store_true", help="write solve times (not reproducible)")
    p.add_argument("--plot", action="store_true", help="also write per-signal plot series")

    p = sub.add_parser("calibrate", help="derive constraint back-offs from closed-loop runs")
    common(p)
    p.add_argument("--scheme", help="scheme label (default: the first hierarchical scheme)")

    p = sub.add_parser("compare", help="run all schemes on the same grid and tabulate")
    common(p)
    p.add_argument("--episodes", type=int, help="cap on episodes per scheme")

    p = sub.add_parser("tree-info", help="print scenario and node counts")
    common(p, seeds=False, outputs=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "episodes", None) is not None and args.episodes < 1:
        print("error: --episodes must be positive", file=sys.stderr)
        return 2
    try:
        cfg, base = _load(args.config)
        exp = build_experiment(cfg, base)
    except (ConfigError, ControllerConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, exp)
    except Exception as exc:  # noqa: BLE001 - reported with a marker file
        out = getattr(args, "out", None) or cfg.output_dir
        if args.command != "tree-info":
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / INCOMPLETE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
