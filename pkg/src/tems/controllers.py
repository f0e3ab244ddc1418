"""Primary (multi-stage) and ancillary (tracking) controllers.

The primary controller solves a scenario-tree OCP over the significant
uncertainty realizations with tightened constraints and produces a
:class:`TreeTrajectory`. The ancillary controller tracks that trajectory from
the measured plant state with input constraints only. Plain multi-stage and
tube-based NMPC are obtained as degenerate configurations
(:func:`make_baseline`).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tems.estimator import FINITE, EstimatorConfig
from tems.model import ModelSpec, UncertaintyDecl
from tems.nlp.problem import INFEASIBLE, NlpSolution
from tems.nlp.sqp import SqpSolver
from tems.nlp.transcription import TreeOcp
from tems.scenario_tree import RealizationSet, ScenarioTree, build_tree, sample_box_vertices

logger = logging.getLogger(__name__)

FULL_TREE = "full_tree"
NOMINAL_ONLY = "nominal_only"

TEMS = "tems"
TUBE = "tube"
MULTI_STAGE = "multi_stage"


class ConfigError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    """Primary OCP infeasible; ``solution`` carries the elastic diagnostics."""

    def __init__(self, message: str, solution: NlpSolution):
        super().__init__(message)
        self.solution = solution


# -- tightening ---------------------------------------------------------------


def tighten_interval(interval, delta_lo: float, delta_hi: float) -> tuple[float, float]:
    """``[a, b]`` with back-offs ``(delta_lo, delta_hi)`` becomes ``[a + delta_lo, b - delta_hi]``."""
    a, b = (float(v) for v in interval)
    if delta_lo < 0 or delta_hi < 0:
        raise ConfigError("tightening must be nonnegative")
    lo, hi = a + delta_lo, b - delta_hi
    if lo > hi:
        raise ConfigError(f"tightening {(delta_lo, delta_hi)} empties the interval [{a}, {b}]")
    return lo, hi


@dataclass(frozen=True)
class TightenedConstraint:
    """``g(x, u) + delta``; satisfied iff ``<= 0``."""

    g: Callable
    delta: float

    def __call__(self, x, u):
        return self.g(x, u) + self.delta


def tighten_constraints(bounds, delta):
    """Tighten a box or a list of constraint functions.

    Args:
        bounds: ``(n, 2)`` intervals, or a sequence of callables ``g_i(x, u)``.
        delta: For a box, ``(n, 2)`` back-offs (or ``(2,)`` broadcast to all
            rows); for constraint functions, one ``delta_i`` per function.

    Returns:
        The tightened ``(n, 2)`` array, or a tuple of tightened callables.
    """
    if len(bounds) and callable(bounds[0]):
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        if delta.shape != (len(bounds),):
            raise ConfigError(f"need one delta per constraint, got shape {delta.shape}")
        if np.any(delta < 0):
            raise ConfigError("tightening must be nonnegative")
        return tuple(TightenedConstraint(g, float(d)) for g, d in zip(bounds, delta))
    box = np.array(bounds, dtype=float).reshape(-1, 2)
    dl = np.broadcast_to(np.asarray(delta, dtype=float), box.shape)
    return np.array([tighten_interval(b, lo, hi) for b, (lo, hi) in zip(box, dl)]).reshape(
        box.shape
    )


def _box_subset(inner, outer) -> bool:
    inner, outer = np.asarray(inner, float), np.asarray(outer, float)
    return bool(np.all(inner[:, 0] >= outer[:, 0]) and np.all(inner[:, 1] <= outer[:, 1]))


# -- configurations -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SolverOptions:
    """SQP settings shared by both controllers."""

    tol: float = 1e-6
    max_iter: int = 100
    hessian: str = "exact"
    derivatives: str = "ad"

    def make(self) -> SqpSolver:
        return SqpSolver(tol=self.tol, max_iter=self.max_iter, hessian=self.hessian)


@dataclass(frozen=True, eq=False)
class PrimaryConfig:
    """Primary OCP data.

    Attributes:
        tree: Scenario tree over the primary realizations.
        stage_cost: Batched ``l(z, v, v_prev)``.
        terminal_cost: Batched ``V_f(z)`` or ``None`` for zero.
        state_box: Box part of the tightened state set Z (default: X's box).
        input_box: Tightened input set V (default: U).
        terminal_box: Terminal set Z_f (default: Z).
        delta: Back-offs ``g_i + delta_i <= 0`` (default: zero).
        solver: SQP settings.
    """

    tree: ScenarioTree
    stage_cost: Callable
    terminal_cost: Callable | None = None
    state_box: np.ndarray | None = None
    input_box: np.ndarray | None = None
    terminal_box: np.ndarray | None = None
    delta: np.ndarray | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)

    @property
    def N(self) -> int:
        return self.tree.N

    def resolved(self, model: ModelSpec) -> dict:
        """Concrete sets, checking ``Z_f ⊆ Z ⊆ X`` and ``V ⊆ U``."""
        Z = model.state_bounds if self.state_box is None else np.asarray(self.state_box, float)
        V = model.input_bounds if self.input_box is None else np.asarray(self.input_box, float)
        Zf = Z if self.terminal_box is None else np.asarray(self.terminal_box, float)
        delta = np.zeros(model.n_c) if self.delta is None else np.asarray(self.delta, float)
        if Z.shape != (model.n_x, 2) or Zf.shape != (model.n_x, 2) or V.shape != (model.n_u, 2):
            raise ConfigError("primary sets do not match the model dimensions")
        if not _box_subset(Z, model.state_bounds):
            raise ConfigError("state set Z is not contained in X")
        if not _box_subset(V, model.input_bounds):
            raise ConfigError("input set V is not contained in U")
        if not _box_subset(Zf, Z):
            raise ConfigError("terminal set Z_f is not contained in Z")
        if delta.shape != (model.n_c,) or np.any(delta < 0):
            raise ConfigError("delta must be a nonnegative vector with one entry per constraint")
        if self.tree.realizations.n_d != model.n_d:
            raise ConfigError("tree realizations do not match the model's uncertainty dimension")
        return {"state_box": Z, "input_box": V, "terminal_box": Zf, "delta": delta}


def _psd_matrix(m, n: int, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim <= 1:
        a = np.diag(np.broadcast_to(a, (n,)))
    if a.shape != (n, n):
        raise ConfigError(f"{name} must be {n}x{n}")
    if not np.allclose(a, a.T):
        raise ConfigError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(a)) < -1e-12:
        raise ConfigError(f"{name} must be positive semi-definite")
    return a


@dataclass(frozen=True, eq=False)
class AncillaryConfig:
    """Tracking controller data.

    Attributes:
        mode: ``"full_tree"`` tracks the whole primary tree;
            ``"nominal_only"`` tracks the nominal path on a single-scenario tree.
        Q, R: Stage weights (matrices or diagonals).
        P: Terminal weight; ``None`` means ``Q``, zero gives ``V_fa = 0``.
        input_box: Input set (default: the original U).
        weights: Node weights for ``full_tree`` (default: the primary tree's).
        solver: SQP settings.
    """

    mode: str = NOMINAL_ONLY
    Q: np.ndarray | tuple = (1.0,)
    R: np.ndarray | tuple = (1.0,)
    P: np.ndarray | tuple | None = None
    input_box: np.ndarray | None = None
    weights: np.ndarray | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)

    def matrices(self, model: ModelSpec):
        if self.mode not in (FULL_TREE, NOMINAL_ONLY):
            raise ConfigError(f"unknown ancillary mode {self.mode!r}")
        Q = _psd_matrix(self.Q, model.n_x, "Q")
        R = _psd_matrix(self.R, model.n_u, "R")
        P = Q if self.P is None else _psd_matrix(self.P, model.n_x, "P")
        return Q, R, P


# -- trajectories ----------------------------------------------------------------


@dataclass(eq=False)
class TreeTrajectory:
    """States per node and inputs per non-leaf node of a solved tree OCP."""

    tree: ScenarioTree
    states: np.ndarray
    inputs: np.ndarray
    objective: float
    status: str = "optimal"
    iterations: int = 0
    kkt_residual: float = 0.0
    solve_time: float = 0.0

    @property
    def root_input(self) -> np.ndarray:
        return self.inputs[0].copy()

    def stage_states(self, k: int) -> np.ndarray:
        return self.states[self.tree.nodes_at_stage(k)]

    def nominal_path(self):
        """States and inputs along the nominal branch."""
        path = self.tree.nominal_path()
        return self.states[path], self.inputs[path[:-1]]

    def dynamics_residual(self, model: ModelSpec) -> float:
        t = self.tree
        par = t.parent[1:]
        d = t.realizations.vectors[t.realization[1:]]
        pred = model.dynamics(self.states[par], self.inputs[par], d)
        return float(np.max(np.abs(self.states[1:] - pred), initial=0.0))


def _shift_guess(prev: TreeTrajectory, tree: ScenarioTree):
    """Map every node to the node one stage later on a representative scenario."""
    if prev is None or prev.tree is not tree:
        return None
    N = tree.N
    leaves = tree.leaves
    nom = tree.realizations.nominal_index
    rep = np.empty(tree.n_nodes, dtype=int)
    counts_seen = {}
    for pos, leaf in enumerate(leaves):
        for node in tree.path(leaf):
            counts_seen.setdefault(node, pos)
    rep[:] = [counts_seen[n] for n in range(tree.n_nodes)]
    if nom is not None:
        rep[0] = int(np.searchsorted(leaves, tree.nominal_path()[-1]))
    Z = np.empty_like(prev.states)
    V = np.empty_like(prev.inputs)
    for n in range(tree.n_nodes):
        k = tree.stage[n]
        Z[n] = prev.states[tree.scenario_node(rep[n], min(k + 1, N))]
        if k < N:
            V[n] = prev.inputs[tree.scenario_node(rep[n], min(k + 1, N - 1))]
    return Z, V


# -- primary controller -----------------------------------------------------------


class PrimaryController:
    """Stateful primary controller (warm-started from its shifted solution)."""

    def __init__(self, config: PrimaryConfig, model: ModelSpec):
        self.config = config
        self.model = model
        sets = config.resolved(model)
        self.ocp = TreeOcp(
            config.tree,
            model,
            config.stage_cost,
            config.terminal_cost,
            initial_state=model.x0,
            derivatives=config.solver.derivatives,
            **sets,
        )
        self.solver = config.solver.make()
        self.last: TreeTrajectory | None = None

    def reset(self):
        self.last = None
        self.solver.reset()

    def solve(self, z0, u_prev=None) -> TreeTrajectory:
        ocp = self.ocp
        ocp.set_parameters(initial_state=z0, u_prev=u_prev)
        guess = _shift_guess(self.last, ocp.tree)
        if guess is None:
            x0 = ocp.cold_start()
        else:
            Z, V = guess
            Z[0] = ocp.initial_state
            x0 = ocp.layout.pack(Z, V)
        start = time.process_time()
        sol = self.solver.solve(ocp.problem(x0=x0))
        elapsed = time.process_time() - start
        if sol.status == INFEASIBLE:
            raise InfeasibleError(
                f"primary OCP infeasible from z0={ocp.initial_state}: {sol.message} "
                f"(primary residual {sol.report.primal_feasibility:.3g})",
                sol,
            )
        if not sol.success:
            logger.warning("primary solve ended with %s (KKT %.2e)", sol.status, sol.kkt_residual)
        Z, V = ocp.layout.unpack(sol.x)
        traj = TreeTrajectory(
            ocp.tree, Z.copy(), V.copy(), sol.objective, sol.status, sol.iterations,
            sol.kkt_residual, elapsed,
        )
        self.last = traj
        return traj


def primary_solve(config: PrimaryConfig, model: ModelSpec, z0, u_prev=None) -> TreeTrajectory:
    """One cold-started primary solve; its root input is ``kappa_p(z0)``."""
    return PrimaryController(config, model).solve(z0, u_prev)


# -- ancillary controller ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrackingCost:
    """``(x - z*)' Q (x - z*) + (u - v*)' R (u - v*)`` per non-leaf node."""

    Q: np.ndarray
    R: np.ndarray
    z_ref: np.ndarray
    v_ref: np.ndarray

    def __call__(self, x, u, u_prev=None):
        ex = x - self.z_ref
        eu = u - self.v_ref
        return ((ex @ self.Q) * ex).sum(axis=-1) + ((eu @ self.R) * eu).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class TrackingTerminal:
    P: np.ndarray
    z_ref: np.ndarray

    def __call__(self, x):
        ex = x - self.z_ref
        return ((ex @ self.P) * ex).sum(axis=-1)


@dataclass(eq=False)
class AncillaryResult:
    input: np.ndarray
    trajectory: TreeTrajectory


class AncillaryController:
    """Tracking controller with input constraints only.

    In ``nominal_only`` mode the internal tree is a single path under the
    full nominal uncertainty vector, tracking the primary's nominal branch.
    In ``full_tree`` mode it shares the primary tree and tracks every node.
    """

    def __init__(self, config: AncillaryConfig, model: ModelSpec, primary_tree: ScenarioTree,
                 nominal=None):
        self.config = config
        self.model = model
        self.Q, self.R, self.P = config.matrices(model)
        self.primary_tree = primary_tree
        if config.mode == FULL_TREE:
            tree = primary_tree
            weights = config.weights
        else:
            if primary_tree.realizations.nominal_index is None:
                raise ConfigError("nominal_only tracking needs a nominal realization in the tree")
            if nominal is None:
                nominal = primary_tree.realizations.vectors[primary_tree.realizations.nominal_index]
            tree = build_tree(RealizationSet(np.asarray(nominal, float)[None, :], 0), primary_tree.N, 1)
            weights = None
        U = model.input_bounds if config.input_box is None else np.asarray(config.input_box, float)
        if not _box_subset(U, model.input_bounds):
            raise ConfigError("ancillary input set exceeds U")
        n_x = model.n_x
        self.ocp = TreeOcp(
            tree,
            model,
            TrackingCost(self.Q, self.R, np.zeros((tree.n_nonleaf, n_x)), np.zeros((tree.n_nonleaf, model.n_u))),
            TrackingTerminal(self.P, np.zeros((tree.leaves.size, n_x))),
            state_box=np.tile([-np.inf, np.inf], (n_x, 1)),
            input_box=U,
            terminal_box=np.tile([-np.inf, np.inf], (n_x, 1)),
            initial_state=model.x0,
            use_constraints=False,
            weights=weights,
            derivatives=config.solver.derivatives,
        )
        self.solver = config.solver.make()

    def reset(self):
        self.solver.reset()

    def _reference(self, reference: TreeTrajectory):
        if self.config.mode == FULL_TREE:
            if reference.tree.n_nodes != self.ocp.tree.n_nodes:
                raise ConfigError("reference tree shape differs from the ancillary tree")
            return reference.states, reference.inputs
        return reference.nominal_path()

    def solve(self, x0, reference: TreeTrajectory) -> AncillaryResult:
        Zr, Vr = self._reference(reference)
        ocp = self.ocp
        leaves = ocp.tree.leaves
        ocp.set_parameters(
            initial_state=x0,
            stage_cost=TrackingCost(self.Q, self.R, Zr[: ocp.tree.n_nonleaf], Vr),
            terminal_cost=TrackingTerminal(self.P, Zr[leaves]),
        )
        # warm start on the reference: exact whenever x0 coincides with its root
        Z = Zr.copy()
        Z[0] = ocp.initial_state
        start = time.process_time()
        sol = self.solver.solve(ocp.problem(x0=ocp.layout.pack(Z, Vr)))
        elapsed = time.process_time() - start
        if not sol.success:
            logger.warning("ancillary solve ended with %s (KKT %.2e)", sol.status, sol.kkt_residual)
        Zs, Vs = ocp.layout.unpack(sol.x)
        traj = TreeTrajectory(
            ocp.tree, Zs.copy(), Vs.copy(), sol.objective, sol.status, sol.iterations,
            sol.kkt_residual, elapsed,
        )
        u = np.clip(traj.root_input, ocp.input_box[:, 0], ocp.input_box[:, 1])
        return AncillaryResult(u, traj)


def ancillary_solve(config: AncillaryConfig, model: ModelSpec, x0, reference: TreeTrajectory,
                    nominal=None) -> AncillaryResult:
    """One ancillary solve; ``result.input`` is ``kappa(x0, z)``."""
    return AncillaryController(config, model, reference.tree, nominal).solve(x0, reference)


# -- schemes ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SchemeConfig:
    """A complete controller setup for the closed loop.

    ``ancillary is None`` means the primary acts on the plant state directly
    (plain multi-stage NMPC); otherwise the hierarchical loop runs with the
    estimator configuration given.
    """

    name: str
    kind: str
    primary: PrimaryConfig
    ancillary: AncillaryConfig | None = None
    estimator: EstimatorConfig | None = None

    @property
    def n_scenarios(self) -> int:
        return self.primary.tree.n_scenarios


def uncertain_dims(decl: UncertaintyDecl) -> np.ndarray:
    return np.flatnonzero(decl.upper > decl.lower)


def make_scheme(
    kind: str,
    model: ModelSpec,
    decl: UncertaintyDecl,
    N: int,
    N_R: int = 1,
    stage_cost: Callable | None = None,
    terminal_cost: Callable | None = None,
    ancillary: AncillaryConfig | None = None,
    estimator: EstimatorConfig | None = None,
    delta=None,
    state_box=None,
    input_box=None,
    solver: SolverOptions | None = None,
    include_nominal: bool = True,
    name: str | None = None,
) -> SchemeConfig:
    """Build a TEMS, tube or multi-stage scheme.

    * ``tems``: tree over the significant dimensions, tightened, with ancillary.
    * ``tube``: single nominal scenario, tightened, with ancillary.
    * ``multi_stage``: tree over every uncertain dimension, untightened, no
      ancillary; applied to the plant state directly.
    """
    stage_cost = stage_cost or model.stage_cost
    if stage_cost is None:
        raise ConfigError("no stage cost given and the model has none")
    solver = solver or SolverOptions()
    if kind == MULTI_STAGE:
        dims = uncertain_dims(decl)
        real = (
            sample_box_vertices(decl, include_nominal, dims)
            if dims.size
            else RealizationSet(decl.nominal[None, :], 0)
        )
        primary = PrimaryConfig(build_tree(real, N, N_R), stage_cost, terminal_cost, solver=solver)
        return SchemeConfig(name or kind, kind, primary)
    if kind == TEMS:
        real = sample_box_vertices(decl, include_nominal)
    elif kind == TUBE:
        real = RealizationSet.nominal_only(decl)
    else:
        raise ConfigError(f"unknown scheme kind {kind!r}")
    primary = PrimaryConfig(
        build_tree(real, N, N_R),
        stage_cost,
        terminal_cost,
        state_box=state_box,
        input_box=input_box,
        delta=delta,
        solver=solver,
    )
    anc = ancillary or AncillaryConfig(Q=np.ones(model.n_x), R=np.ones(model.n_u), solver=solver)
    if kind == TUBE and anc.mode == FULL_TREE:
        anc = AncillaryConfig(NOMINAL_ONLY, anc.Q, anc.R, anc.P, anc.input_box, None, anc.solver)
    est = estimator or EstimatorConfig()
    if kind == TUBE:
        # the primary system of a tube scheme is the nominal model
        est = EstimatorConfig(FINITE, est.w_diag, est.tol)
    return SchemeConfig(name or kind, kind, primary, anc, est)


def make_baseline(kind: str, model: ModelSpec, decl: UncertaintyDecl, N: int, **kwargs) -> SchemeConfig:
    """Plain multi-stage or tube-based NMPC as a degenerate scheme."""
    if kind not in (MULTI_STAGE, TUBE):
        raise ConfigError(f"baseline kind must be {MULTI_STAGE!r} or {TUBE!r}")
    if kind == MULTI_STAGE:
        kwargs.pop("delta", None)
        kwargs.pop("ancillary", None)
        kwargs.pop("estimator", None)
    return make_scheme(kind, model, decl, N, **kwargs)
