"""Turn an :class:`ExperimentConfig` into models, schemes and plant templates."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tems.calibration import TighteningReport
from tems.closed_loop import PlantSim, StateTarget, grid_points
from tems.config import ConfigError, ExperimentConfig, SchemeSection
from tems.controllers import AncillaryConfig, SchemeConfig, SolverOptions, make_scheme
from tems.estimator import EstimatorConfig
from tems.model import EconomicCost, ModelError, ModelSpec, QuadraticCost, UncertaintyDecl, get_model
from tems.scenario_tree import naive_scenario_count, state_node_count


def _check_len(values, n: int, path: str):
    if values is not None and len(values) != n:
        raise ConfigError(f"{path}: expected {n} entries, got {len(values)}")


def build_model(cfg: ExperimentConfig) -> tuple[ModelSpec, UncertaintyDecl]:
    """Model with the configured input bounds and uncertainty overrides."""
    try:
        model, decl = get_model(cfg.model.name, **cfg.model.params)
    except TypeError as exc:
        raise ConfigError(f"model.params: {exc}") from None
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from None
    _check_len(cfg.model.input_bounds, model.n_u, "model.input_bounds")
    model = dataclasses.replace(model, input_bounds=np.array(cfg.model.input_bounds, dtype=float))
    u = cfg.uncertainty
    for name in ("nominal", "lower", "upper", "significant"):
        _check_len(getattr(u, name), decl.n_d, f"uncertainty.{name}")
    try:
        decl = UncertaintyDecl(
            nominal=decl.nominal if u.nominal is None else u.nominal,
            lower=decl.lower if u.lower is None else u.lower,
            upper=decl.upper if u.upper is None else u.upper,
            significant=decl.significant if u.significant is None else u.significant,
            additive=decl.additive,
            names=decl.names,
        )
    except (ValueError, ModelError) as exc:
        raise ConfigError(f"uncertainty: {exc}") from None
    return model, decl


def build_stage_cost(cfg: ExperimentConfig, model: ModelSpec):
    pc = cfg.primary_cost
    if pc.kind == "quadratic":
        _check_len(pc.q, model.n_x, "primary_cost.q")
        _check_len(pc.r, model.n_u, "primary_cost.r")
        return QuadraticCost(q=tuple(pc.q), r=tuple(pc.r))
    cost = model.stage_cost
    if cost is None:
        raise ConfigError("primary_cost.kind: the model has no native stage cost")
    if pc.move_weights is not None:
        if not isinstance(cost, EconomicCost):
            raise ConfigError("primary_cost.move_weights: only valid for economic costs")
        _check_len(pc.move_weights, model.n_u, "primary_cost.move_weights")
        cost = dataclasses.replace(cost, move_weights=tuple(pc.move_weights))
    return cost


def resolve_delta(cfg: ExperimentConfig, model: ModelSpec, base_dir: str | Path | None = None) -> np.ndarray:
    """Back-offs from the config: explicit, from a calibration report, or zero."""
    t = cfg.tightening
    if t.delta is not None:
        _check_len(t.delta, model.n_c, "tightening.delta")
        return np.array(t.delta, dtype=float)
    if t.calibration is not None:
        path = Path(t.calibration)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        try:
            report = TighteningReport.from_dict(json.loads(path.read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"tightening.calibration: cannot read {path}: {exc}") from None
        _check_len(report.delta, model.n_c, "tightening.calibration")
        return np.array(report.delta, dtype=float)
    return np.zeros(model.n_c)


@dataclass(frozen=True, eq=False)
class Experiment:
    """Everything needed to simulate the configured schemes."""

    config: ExperimentConfig
    model: ModelSpec
    decl: UncertaintyDecl
    plant: PlantSim
    schemes: tuple[SchemeConfig, ...]
    delta: np.ndarray

    def scheme(self, label: str | None = None) -> SchemeConfig:
        if label is None:
            return self.schemes[0]
        for s in self.schemes:
            if s.name == label:
                return s
        raise ConfigError(f"no scheme named {label!r}; have {[s.name for s in self.schemes]}")

    def grid(self) -> dict:
        return dict(self.config.grid.counts)

    def untightened(self, scheme: SchemeConfig) -> SchemeConfig:
        return dataclasses.replace(
            scheme, primary=dataclasses.replace(scheme.primary, delta=np.zeros(self.model.n_c))
        )


def build_scheme(
    cfg: ExperimentConfig, section: SchemeSection, model, decl, stage_cost, delta
) -> SchemeConfig:
    solver = SolverOptions(tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
    a = cfg.ancillary
    _check_len(a.Q, model.n_x, "ancillary.Q")
    _check_len(a.R, model.n_u, "ancillary.R")
    _check_len(a.P, model.n_x, "ancillary.P")
    anc = AncillaryConfig(
        mode=a.mode,
        Q=tuple(a.Q),
        R=tuple(a.R),
        P=None if a.P is None else tuple(a.P),
        solver=solver,
    )
    e = cfg.estimator
    _check_len(e.w_diag, model.n_d, "estimator.w_diag")
    est = EstimatorConfig(e.kind, None if e.w_diag is None else tuple(e.w_diag), e.tol)
    return make_scheme(
        section.kind,
        model,
        decl,
        cfg.tree.N,
        N_R=cfg.tree.N_R,
        stage_cost=stage_cost,
        ancillary=anc,
        estimator=est,
        delta=delta if section.tightened else np.zeros(model.n_c),
        solver=solver,
        include_nominal=cfg.tree.values_per_dim == 3,
        name=section.label,
    )


def build_plant(cfg: ExperimentConfig, model: ModelSpec, decl: UncertaintyDecl) -> PlantSim:
    sim = cfg.simulation
    stop = None
    if sim.target is not None:
        key = sim.target.state
        if isinstance(key, str):
            if key not in model.state_names:
                raise ConfigError(f"simulation.target.state: unknown state {key!r}")
            key = model.state_names.index(key)
        if not 0 <= key < model.n_x:
            raise ConfigError(f"simulation.target.state: index {key} out of range")
        stop = StateTarget(key, sim.target.value)
    _check_len(sim.x0, model.n_x, "simulation.x0")
    return PlantSim(
        model,
        decl,
        max_steps=sim.max_steps,
        stop=stop,
        x0=None if sim.x0 is None else np.array(sim.x0, dtype=float),
    )


def build_experiment(cfg: ExperimentConfig, base_dir: str | Path | None = None) -> Experiment:
    model, decl = build_model(cfg)
    stage_cost = build_stage_cost(cfg, model)
    delta = resolve_delta(cfg, model, base_dir)
    schemes = tuple(build_scheme(cfg, s, model, decl, stage_cost, delta) for s in cfg.schemes)
    plant = build_plant(cfg, model, decl)
    try:
        grid_points(decl, dict(cfg.grid.counts))
    except ValueError as exc:
        raise ConfigError(f"grid.counts: {exc}") from None
    return Experiment(cfg, model, decl, plant, schemes, delta)


def tree_info(exp: Experiment) -> dict:
    """Scenario and node counts of the first TEMS-like scheme, plus the naive count."""
    cfg = exp.config
    scheme = exp.scheme()
    tree = scheme.primary.tree
    n_uncertain = int(np.sum(exp.decl.upper > exp.decl.lower))
    values = cfg.tree.values_per_dim
    return {
        "scheme": scheme.name,
        "scenarios": tree.n_scenarios,
        "state_nodes": state_node_count(len(tree.realizations), cfg.tree.N, cfg.tree.N_R),
        "naive_full_branching": naive_scenario_count(values, n_uncertain, cfg.tree.N_R),
    }
