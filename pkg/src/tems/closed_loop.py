"""Closed-loop simulation of the hierarchical controller and batch experiments.

One episode runs the loop::

    t = 0:  z = x(0), solve the primary from z, apply its root input
    t >= 1: measure x(t); estimate d_bar(t-1) from (x(t-1), u(t-1), x(t));
            z(t) = f(z(t-1), v0(t-1), d_bar(t-1)); solve the primary from
            z(t); solve the ancillary from x(t) against the primary tree;
            apply its root input

Schemes without an ancillary controller (plain multi-stage NMPC) solve the
primary from the measured state and apply its root input directly.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from tems.controllers import (
    AncillaryController,
    InfeasibleError,
    PrimaryController,
    SchemeConfig,
)
from tems.estimator import FINITE, estimate_box, estimate_finite, estimation_box, propagate_primary
from tems.model import ModelSpec, UncertaintyDecl, step

logger = logging.getLogger(__name__)

UNIFORM = "uniform"
CONSTANT_LOWER = "constant_lower"
CONSTANT_UPPER = "constant_upper"
ADDITIVE_MODES = (UNIFORM, CONSTANT_LOWER, CONSTANT_UPPER)

COMPLETED = "completed"
INFEASIBLE = "infeasible"
ERROR = "error"


@dataclass(frozen=True)
class StateTarget:
    """Stop once ``x[index] >= target``."""

    index: int
    target: float

    def __call__(self, x) -> bool:
        return bool(x[self.index] >= self.target)


@dataclass(frozen=True, eq=False)
class PlantSim:
    """Simulated plant.

    Attributes:
        model: True dynamics.
        decl: Uncertainty declaration; ``additive`` dimensions are drawn every
            step, the others are held at ``true_params``.
        true_params: Full uncertainty vector; its parametric entries are the
            episode's true values (additive entries are ignored).
        additive_mode: ``uniform`` draws, or constant at the lower/upper bound.
        max_steps: Episode cap.
        stop: Optional predicate on the state ending the episode early.
        x0: Initial state (default: the model's).
    """

    model: ModelSpec
    decl: UncertaintyDecl
    true_params: np.ndarray | None = None
    additive_mode: str = UNIFORM
    max_steps: int = 40
    stop: StateTarget | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        tp = self.decl.nominal if self.true_params is None else self.true_params
        tp = np.asarray(tp, dtype=float).copy()
        if tp.shape != (self.decl.n_d,):
            raise ValueError("true_params must have one entry per uncertainty dimension")
        tp[self.decl.additive] = self.decl.nominal[self.decl.additive]
        if not self.decl.contains(tp):
            raise ValueError(f"true parameters {tp} lie outside the uncertainty box")
        object.__setattr__(self, "true_params", tp)
        if self.additive_mode not in ADDITIVE_MODES:
            raise ValueError(f"unknown additive mode {self.additive_mode!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        x0 = self.model.x0 if self.x0 is None else np.asarray(self.x0, dtype=float)
        object.__setattr__(self, "x0", x0)

    def with_params(self, true_params, **changes) -> "PlantSim":
        kw = {k: getattr(self, k) for k in ("model", "decl", "additive_mode", "max_steps", "stop", "x0")}
        kw.update(changes)
        return PlantSim(true_params=true_params, **kw)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        d = self.true_params.copy()
        add = self.decl.additive
        if add.any():
            lo, hi = self.decl.lower[add], self.decl.upper[add]
            if self.additive_mode == UNIFORM:
                d[add] = rng.uniform(lo, hi)
            elif self.additive_mode == CONSTANT_LOWER:
                d[add] = lo
            else:
                d[add] = hi
        return d


@dataclass(eq=False)
class ClosedLoopTrace:
    """Per-step record of one episode.

    ``x``, ``z``, ``dbar`` and ``viol`` have ``T + 1`` rows; ``u``, ``v0`` and
    the solve times have ``T`` rows. Row ``t`` of ``dbar`` holds the estimate
    ``d_bar(t-1)`` (``nan`` at ``t = 0`` and for schemes without estimator).
    ``viol`` holds ``max(0, g_i)`` of the original constraints; the final
    state is paired with the last applied input. Solve times are process CPU
    seconds, which are insensitive to other load on the machine.
    """

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    v0: np.ndarray
    dbar: np.ndarray
    d: np.ndarray
    viol: np.ndarray
    t_primary: np.ndarray
    t_ancillary: np.ndarray
    t_estimator: np.ndarray
    stage1: list = field(default_factory=list)
    status: str = COMPLETED
    message: str = ""
    reached_target: bool = False

    @property
    def T(self) -> int:
        return self.u.shape[0]


def _violations(model: ModelSpec, x, u) -> np.ndarray:
    if model.n_c == 0:
        return np.zeros(0)
    return np.maximum(np.asarray(model.constraint_values(x, u), dtype=float).reshape(model.n_c), 0.0)


def run_episode(plant: PlantSim, scheme: SchemeConfig, x0=None, seed: int = 0) -> ClosedLoopTrace:
    """Run one closed-loop episode; a primary infeasibility ends it early."""
    model = plant.model
    rng = np.random.default_rng(seed)
    x = plant.x0.copy() if x0 is None else np.asarray(x0, dtype=float)
    primary = PrimaryController(scheme.primary, model)
    hierarchical = scheme.ancillary is not None
    if hierarchical:
        ancillary = AncillaryController(
            scheme.ancillary, model, scheme.primary.tree, nominal=plant.decl.nominal
        )
        est_cfg = scheme.estimator
        W = est_cfg.weight_matrix(model.n_d)
        candidates = scheme.primary.tree.realizations
        box = estimation_box(plant.decl)
    u_prev = model.input_bounds[:, 0].copy()

    xs, zs, us, v0s, dbars, ds, tps, tas, tes, stage1 = [x], [], [], [], [], [], [], [], [], []
    z = x.copy()
    v_prev = u_prev
    d_est = None
    status, message = COMPLETED, ""
    t = 0
    while True:
        t_est = 0.0
        if hierarchical and t > 0:
            s0 = time.process_time()
            if est_cfg.kind == FINITE:
                res = estimate_finite(model, xs[-2], us[-1], x, candidates, d_est, W)
            else:
                res = estimate_box(model, xs[-2], us[-1], x, box, d_est, W, tol=est_cfg.tol)
            t_est = time.process_time() - s0
            d_est = res.d_bar
            z = propagate_primary(model, z, v_prev, d_est)
            dbars.append(d_est.copy())
        else:
            dbars.append(np.full(model.n_d, np.nan))
        zs.append(z.copy() if hierarchical else x.copy())
        if t >= plant.max_steps or (plant.stop is not None and plant.stop(x)):
            break
        try:
            s0 = time.process_time()
            traj = primary.solve(z, v_prev) if hierarchical else primary.solve(x, u_prev)
            t_pri = time.process_time() - s0
        except InfeasibleError as exc:
            status, message = INFEASIBLE, str(exc)
            logger.info("episode stopped at t=%d: %s", t, exc)
            break
        v0 = traj.root_input
        stage1.append(traj.stage_states(1).copy())
        t_anc = 0.0
        if hierarchical and t > 0:
            s0 = time.process_time()
            u = ancillary.solve(x, traj).input
            t_anc = time.process_time() - s0
        else:
            u = v0.copy()
        d = plant.draw(rng)
        x_next = step(model, x, u, d)
        us.append(u)
        v0s.append(v0)
        ds.append(d)
        tps.append(t_pri)
        tas.append(t_anc)
        tes.append(t_est)
        xs.append(x_next)
        x, u_prev, v_prev = x_next, u, v0
        t += 1

    T = len(us)
    u_arr = np.array(us).reshape(T, model.n_u)
    viol = np.array(
        [_violations(model, xs[k], u_arr[min(k, T - 1)] if T else u_prev) for k in range(T + 1)]
    ).reshape(T + 1, model.n_c)
    reached = plant.stop is not None and bool(plant.stop(xs[-1]))
    return ClosedLoopTrace(
        x=np.array(xs),
        z=np.array(zs),
        u=u_arr,
        v0=np.array(v0s).reshape(T, model.n_u),
        dbar=np.array(dbars),
        d=np.array(ds).reshape(T, model.n_d),
        viol=viol,
        t_primary=np.array(tps),
        t_ancillary=np.array(tas),
        t_estimator=np.array(tes),
        stage1=stage1,
        status=status,
        message=message,
        reached_target=reached,
    )


# -- metrics ----------------------------------------------------------------------


@dataclass
class EpisodeSummary:
    """JSON-friendly result of one episode."""

    scheme: str
    episode: int
    seed: int
    params: list
    status: str
    steps: int
    reached_target: bool
    violating_steps: list
    max_violation: list
    mean_primary_ms: float
    mean_ancillary_ms: float
    mean_estimator_ms: float
    mean_iteration_ms: float
    message: str = ""

    def violated(self, i: int) -> bool:
        return self.violating_steps[i] > 0

    def to_dict(self) -> dict:
        return asdict(self)


def episode_metrics(trace: ClosedLoopTrace, violation_tol: float = 1e-6) -> dict:
    """Step counts, violation counts and mean solve times of one trace."""
    viol = trace.viol
    n_c = viol.shape[1]
    T = trace.T

    def mean_ms(a):
        return float(np.mean(a) * 1e3) if len(a) else 0.0

    return {
        "steps": T,
        "reached_target": trace.reached_target,
        "violating_steps": [int(np.sum(viol[:, i] > violation_tol)) for i in range(n_c)],
        "max_violation": [float(np.max(viol[:, i], initial=0.0)) for i in range(n_c)],
        "mean_primary_ms": mean_ms(trace.t_primary),
        "mean_ancillary_ms": mean_ms(trace.t_ancillary),
        "mean_estimator_ms": mean_ms(trace.t_estimator),
        "mean_iteration_ms": mean_ms(trace.t_primary + trace.t_ancillary + trace.t_estimator),
    }


# -- batches ----------------------------------------------------------------------


def grid_points(decl: UncertaintyDecl, grid) -> np.ndarray:
    """Cartesian uniform grid over the parametric box.

    ``grid`` maps a dimension (index or name) to its sample count; unlisted
    parametric dimensions stay nominal and a count of 1 means nominal.
    An array of shape ``(n_points, n_d)`` is taken as explicit points
    (additive entries are ignored).
    """
    if not isinstance(grid, dict):
        pts = np.atleast_2d(np.asarray(grid, dtype=float)).copy()
        if pts.ndim != 2 or pts.shape[1] != decl.n_d or pts.shape[0] == 0:
            raise ValueError(f"explicit grid must have shape (n, {decl.n_d})")
        pts[:, decl.additive] = decl.nominal[decl.additive]
        for p in pts:
            if not decl.contains(p):
                raise ValueError(f"grid point {p} lies outside the uncertainty box")
        return pts
    axes = [np.array([v]) for v in decl.nominal]
    for key, count in grid.items():
        i = decl.names.index(key) if isinstance(key, str) else int(key)
        if decl.additive[i]:
            raise ValueError(f"dimension {decl.names[i]!r} is additive and cannot be gridded")
        count = int(count)
        if count < 1:
            raise ValueError("grid counts must be positive")
        axes[i] = (
            np.array([decl.nominal[i]]) if count == 1 else np.linspace(decl.lower[i], decl.upper[i], count)
        )
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def episode_seed(master_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(episode)]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class EpisodeTask:
    scheme: SchemeConfig
    plant: PlantSim
    episode: int
    seed: int
    violation_tol: float = 1e-6
    keep_trace: bool = False


def run_task(task: EpisodeTask):
    """Worker entry point; never raises."""
    try:
        trace = run_episode(task.plant, task.scheme, seed=task.seed)
        m = episode_metrics(trace, task.violation_tol)
        summary = EpisodeSummary(
            scheme=task.scheme.name,
            episode=task.episode,
            seed=task.seed,
            params=task.plant.true_params.tolist(),
            status=trace.status,
            message=trace.message,
            **m,
        )
        return summary, (trace if task.keep_trace else None)
    except Exception as exc:  # noqa: BLE001 - recorded per episode
        logger.warning("episode %d failed: %s", task.episode, exc)
        n_c = task.plant.model.n_c
        summary = EpisodeSummary(
            scheme=task.scheme.name,
            episode=task.episode,
            seed=task.seed,
            params=task.plant.true_params.tolist(),
            status=ERROR,
            steps=0,
            reached_target=False,
            violating_steps=[0] * n_c,
            max_violation=[0.0] * n_c,
            mean_primary_ms=0.0,
            mean_ancillary_ms=0.0,
            mean_estimator_ms=0.0,
            mean_iteration_ms=0.0,
            message=f"{type(exc).__name__}: {exc}",
        )
        return summary, None


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("TEMS_WORKERS", "1")))
    except ValueError:
        return 1


def make_tasks(plant, scheme, grid, master_seed, seeds_per_point=1, additive_modes=None,
               violation_tol=1e-6, keep_trace=False):
    """Episodes for every grid point, additive mode and replicate."""
    points = grid_points(plant.decl, grid)
    modes = additive_modes or [plant.additive_mode]
    tasks = []
    for p in points:
        for mode in modes:
            for _ in range(seeds_per_point):
                idx = len(tasks)
                tasks.append(
                    EpisodeTask(
                        scheme,
                        plant.with_params(p, additive_mode=mode),
                        idx,
                        episode_seed(master_seed, idx),
                        violation_tol,
                        keep_trace,
                    )
                )
    return tasks


def run_tasks(tasks, workers: int | None = None):
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_task, tasks))


def run_batch_grid(
    plant: PlantSim,
    scheme: SchemeConfig,
    grid: dict,
    master_seed: int,
    seeds_per_point: int = 1,
    workers: int | None = None,
    additive_modes=None,
    violation_tol: float = 1e-6,
    keep_traces: bool = False,
):
    """Run one episode per grid point and replicate with derived seeds.

    Returns the list of :class:`EpisodeSummary` (and the traces when
    ``keep_traces``). Episode errors are recorded, not raised.
    """
    tasks = make_tasks(plant, scheme, grid, master_seed, seeds_per_point, additive_modes,
                       violation_tol, keep_traces)
    results = run_tasks(tasks, workers)
    summaries = [r[0] for r in results]
    if keep_traces:
        return summaries, [r[1] for r in results]
    return summaries


# -- comparison ---------------------------------------------------------------------


@dataclass
class ComparisonRow:
    scheme: str
    scenarios: int
    episodes: int
    failed: int
    avg_steps: float
    violating_episodes: list
    avg_iteration_ms: float
    avg_primary_ms: float
    avg_ancillary_ms: float


@dataclass
class ComparisonTable:
    constraint_names: tuple
    rows: list

    def header(self) -> list[str]:
        return (
            ["scheme", "scenarios", "episodes", "failed", "avg_steps"]
            + [f"violating_episodes[{n}]" for n in self.constraint_names]
            + ["avg_iteration_ms", "avg_primary_ms", "avg_ancillary_ms"]
        )

    def records(self) -> list[list]:
        return [
            [r.scheme, r.scenarios, r.episodes, r.failed, r.avg_steps]
            + list(r.violating_episodes)
            + [r.avg_iteration_ms, r.avg_primary_ms, r.avg_ancillary_ms]
            for r in self.rows
        ]

    def to_text(self) -> str:
        """Metric rows by scheme columns."""
        names = [r.scheme for r in self.rows]
        lines = [("metric", names)]
        lines.append(("avg. steps to target", [f"{r.avg_steps:.2f}" for r in self.rows]))
        for i, c in enumerate(self.constraint_names):
            lines.append((f"violating episodes ({c})", [str(r.violating_episodes[i]) for r in self.rows]))
        lines.append(("avg. comp. time per iter. [ms]", [f"{r.avg_iteration_ms:.2f}" for r in self.rows]))
        lines.append(("scenarios", [str(r.scenarios) for r in self.rows]))
        w0 = max(len(l[0]) for l in lines)
        ws = [max(len(l[1][j]) for l in lines) for j in range(len(names))]
        out = []
        for label, cells in lines:
            out.append(
                label.ljust(w0) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, ws))
            )
        return "\n".join(out) + "\n"


def summarize(name: str, scenarios: int, summaries, constraint_names) -> ComparisonRow:
    ok = [s for s in summaries if s.status != ERROR]
    n_c = len(constraint_names)

    def avg(vals):
        return float(np.mean(vals)) if len(vals) else float("nan")

    return ComparisonRow(
        scheme=name,
        scenarios=scenarios,
        episodes=len(summaries),
        failed=len(summaries) - sum(s.status == COMPLETED for s in summaries),
        avg_steps=avg([s.steps for s in ok]),
        violating_episodes=[sum(s.violated(i) for s in ok) for i in range(n_c)],
        avg_iteration_ms=avg([s.mean_iteration_ms for s in ok]),
        avg_primary_ms=avg([s.mean_primary_ms for s in ok]),
        avg_ancillary_ms=avg([s.mean_ancillary_ms for s in ok]),
    )


def compare_schemes(
    schemes,
    plant: PlantSim,
    grid: dict,
    master_seed: int,
    seeds_per_point: int = 1,
    workers: int | None = None,
    violation_tol: float = 1e-6,
    additive_modes=None,
    max_episodes: int | None = None,
):
    """Run every scheme on the same grid and seeds.

    ``max_episodes`` keeps only the first episodes of each scheme's task
    list. Returns ``(table, summaries_by_scheme)``.
    """
    schemes = list(schemes)
    tasks, owner = [], []
    for j, sc in enumerate(schemes):
        ts = make_tasks(plant, sc, grid, master_seed, seeds_per_point, additive_modes,
                        violation_tol=violation_tol)
        if max_episodes is not None:
            ts = ts[:max_episodes]
        tasks.extend(ts)
        owner.extend([j] * len(ts))
    results = run_tasks(tasks, workers)
    per = [[] for _ in schemes]
    for j, (summary, _) in zip(owner, results):
        per[j].append(summary)
    rows = [
        summarize(sc.name, sc.n_scenarios, per[j], plant.model.constraint_names)
        for j, sc in enumerate(schemes)
    ]
    by_scheme = {}
    for sc, ss in zip(schemes, per):
        by_scheme.setdefault(sc.name, ss)
    return ComparisonTable(plant.model.constraint_names, rows), by_scheme
