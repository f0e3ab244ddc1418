"""On-disk formats: trace CSVs, JSON-lines summaries, comparison tables, plot series.

Numbers are written with 17 significant digits so equal runs give
byte-identical files. Every file starts with a ``#`` provenance line carrying
the configuration hash and the seed.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from tems.closed_loop import ClosedLoopTrace, ComparisonTable, EpisodeSummary
from tems.model import ModelSpec, StateBound


def fmt(value) -> str:
    """``%.17g`` with ``nan``/``inf`` spelled out."""
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def provenance(config_hash: str, seed: int | None) -> str:
    return f"# config_hash={config_hash} seed={'' if seed is None else seed}\n"


def trace_header(model: ModelSpec) -> list[str]:
    cols = ["t"]
    cols += [f"x[{i}]" for i in range(model.n_x)]
    cols += [f"z[{i}]" for i in range(model.n_x)]
    cols += [f"u[{i}]" for i in range(model.n_u)]
    cols += [f"dbar[{i}]" for i in range(model.n_d)]
    cols += [f"viol[{i}]" for i in range(model.n_c)]
    return cols + ["t_primary_ms", "t_ancillary_ms"]


def _pad(a: np.ndarray, rows: int, width: int) -> np.ndarray:
    out = np.full((rows, width), np.nan)
    a = np.asarray(a, dtype=float).reshape(-1, width) if width else np.zeros((0, 0))
    out[: a.shape[0]] = a
    return out


def trace_rows(trace: ClosedLoopTrace, model: ModelSpec, timings: bool = False) -> np.ndarray:
    """One row per recorded time ``t = 0..T``.

    Inputs and solve times exist for ``t < T`` only; the final row holds
    ``nan`` there. Solve times are ``nan`` unless ``timings`` is set, since
    wall-clock values would break byte-level reproducibility.
    """
    rows = trace.x.shape[0]
    T = trace.T
    times = np.full((rows, 2), np.nan)
    if timings:
        times[:T, 0] = trace.t_primary * 1e3
        times[:T, 1] = trace.t_ancillary * 1e3
    return np.hstack(
        [
            np.arange(rows, dtype=float)[:, None],
            trace.x,
            _pad(trace.z, rows, model.n_x),
            _pad(trace.u, rows, model.n_u),
            _pad(trace.dbar, rows, model.n_d),
            _pad(trace.viol, rows, model.n_c),
            times,
        ]
    )


def write_trace_csv(
    path: str | Path,
    trace: ClosedLoopTrace,
    model: ModelSpec,
    config_hash: str,
    seed: int | None,
    timings: bool = False,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = trace_rows(trace, model, timings)
    with path.open("w", newline="") as fh:
        fh.write(provenance(config_hash, seed))
        fh.write(",".join(trace_header(model)) + "\n")
        for row in data:
            cells = [str(int(row[0]))] + [fmt(v) for v in row[1:]]
            fh.write(",".join(cells) + "\n")
    return path


def read_trace_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and numeric rows of a trace CSV (provenance line skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]])
    return header, data


TIMING_FIELDS = ("mean_primary_ms", "mean_ancillary_ms", "mean_estimator_ms", "mean_iteration_ms")


def write_summaries_jsonl(
    path: str | Path,
    summaries: list[EpisodeSummary],
    config_hash: str,
    seed: int | None,
    timings: bool = True,
) -> Path:
    """One JSON object per episode; ``timings=False`` writes the solve times as ``null``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(provenance(config_hash, seed))
        for s in summaries:
            rec = s.to_dict()
            if not timings:
                rec.update(dict.fromkeys(TIMING_FIELDS))
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_summaries_jsonl(path: str | Path) -> list[dict]:
    return [
        json.loads(ln)
        for ln in Path(path).read_text().splitlines()
        if ln.strip() and not ln.startswith("#")
    ]


def write_comparison(
    out_dir: str | Path, table: ComparisonTable, config_hash: str, seed: int | None
) -> tuple[Path, Path]:
    """``comparison.csv`` (one row per scheme) and ``comparison.txt`` (aligned)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        fh.write(provenance(config_hash, seed))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header())
        for rec in table.records():
            w.writerow([fmt(v) if isinstance(v, float) else v for v in rec])
    txt_path = out_dir / "comparison.txt"
    txt_path.write_text(provenance(config_hash, seed) + table.to_text())
    return csv_path, txt_path


def _state_limits(model: ModelSpec, i: int) -> tuple[float, float]:
    """Original bounds on state ``i``: the state box tightened by simple bound constraints."""
    lo, hi = (-np.inf, np.inf) if model.state_bounds is None else model.state_bounds[i]
    for g in model.constraints:
        if isinstance(g, StateBound) and g.index == i:
            if g.upper:
                hi = min(hi, g.limit)
            else:
                lo = max(lo, g.limit)
    return float(lo), float(hi)


def _write_series(path: Path, time, values, lower, upper, head: str):
    with path.open("w") as fh:
        fh.write(head)
        fh.write("time,value,lower,upper\n")
        for t, v in zip(time, values):
            fh.write(f"{fmt(t)},{fmt(v)},{fmt(lower)},{fmt(upper)}\n")


def emit_plot_data(
    trace: ClosedLoopTrace,
    model: ModelSpec,
    out_dir: str | Path,
    config_hash: str = "",
    seed: int | None = None,
) -> list[Path]:
    """Per-signal CSV series ``time,value,lower,upper`` for plotting.

    Plant and primary states carry the original state limits, inputs the
    bounds of U; unbounded sides are written as ``inf``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    head = provenance(config_hash, seed)
    names_x = model.state_names or tuple(f"x{i}" for i in range(model.n_x))
    names_u = model.input_names or tuple(f"u{i}" for i in range(model.n_u))
    t_state = np.arange(trace.x.shape[0]) * model.dt
    t_input = np.arange(trace.T) * model.dt
    written = []
    for i, name in enumerate(names_x):
        lo, hi = _state_limits(model, i)
        for prefix, series in (("x", trace.x), ("z", trace.z)):
            p = out_dir / f"{prefix}_{name}.csv"
            _write_series(p, t_state[: len(series)], series[:, i], lo, hi, head)
            written.append(p)
    for i, name in enumerate(names_u):
        lo, hi = model.input_bounds[i]
        p = out_dir / f"u_{name}.csv"
        _write_series(p, t_input, trace.u[:, i], lo, hi, head)
        written.append(p)
    return written
