"""Simulation-based constraint tightening.

The primary controller is run in closed loop with untightened constraints
over a grid of uncertainty realizations; the worst observed violation of
each original constraint, times a safety factor, becomes its back-off
``delta_i``. Verification reruns the grid with the tightened design.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from tems.closed_loop import (
    ADDITIVE_MODES,
    COMPLETED,
    ERROR,
    EpisodeSummary,
    PlantSim,
    run_batch_grid,
)
from tems.controllers import SchemeConfig
from tems.model import UncertaintyDecl
from tems.scenario_tree import sample_box_vertices

logger = logging.getLogger(__name__)


def with_delta(scheme: SchemeConfig, delta) -> SchemeConfig:
    """Copy of ``scheme`` whose primary controller uses back-offs ``delta``."""
    delta = None if delta is None else np.asarray(delta, dtype=float).copy()
    primary = dataclasses.replace(scheme.primary, delta=delta)
    return dataclasses.replace(scheme, primary=primary)


def calibration_grid(decl: UncertaintyDecl) -> np.ndarray:
    """Vertices of the parametric box plus the nominal point."""
    dims = np.flatnonzero(~decl.additive)
    if dims.size == 0:
        return decl.nominal[None, :].copy()
    verts = sample_box_vertices(decl, include_nominal=False, dims=dims).vectors
    if not np.any(np.all(verts == decl.nominal, axis=1)):
        verts = np.vstack([verts, decl.nominal])
    return verts


def round_up(value: float, precision: float | None) -> float:
    """Round ``value`` up to a multiple of ``precision`` (``None``: unchanged).

    A relative slack of 1e-9 keeps exact multiples such as ``0.45`` from
    being bumped by floating-point noise in the division.
    """
    if precision is None or value <= 0.0:
        return max(value, 0.0)
    q = value / precision
    n = math.ceil(q - 1e-9 * max(1.0, q))
    return float(round(n * precision, 12))


@dataclass
class VerificationReport:
    """Per-constraint outcome of a closed-loop grid run.

    Attributes:
        episodes: Number of episodes run.
        failed: Episodes that ended infeasible or with an error.
        violating_episodes: Episodes with at least one violating step, per constraint.
        violating_steps: Total violating steps, per constraint.
        max_violation: Largest ``max(0, g_i)`` over all steps, per constraint.
    """

    episodes: int
    failed: int
    violating_episodes: list[int]
    violating_steps: list[int]
    max_violation: list[float]

    @property
    def clean(self) -> bool:
        return not any(self.violating_episodes)

    @classmethod
    def from_summaries(cls, summaries: list[EpisodeSummary], n_c: int) -> "VerificationReport":
        ok = [s for s in summaries if s.status != ERROR]
        failed = sum(s.status != COMPLETED for s in summaries)
        if failed:
            logger.warning("%d of %d episodes did not complete", failed, len(summaries))
        return cls(
            episodes=len(summaries),
            failed=failed,
            violating_episodes=[sum(s.violated(i) for s in ok) for i in range(n_c)],
            violating_steps=[sum(s.violating_steps[i] for s in ok) for i in range(n_c)],
            max_violation=[max((s.max_violation[i] for s in ok), default=0.0) for i in range(n_c)],
        )


@dataclass
class TighteningReport:
    """Result of a calibration.

    ``max_violation`` is the back-off requirement per constraint: the worst
    violation seen with ``delta = 0`` plus, for every recalibration round, the
    worst violation that remained under the previous ``delta``. The invariant
    ``delta_i = round_up(safety_factor * max_violation_i)`` always holds.
    """

    constraint_names: list[str]
    max_violation: list[float]
    delta: list[float]
    safety_factor: float
    precision: float | None
    rounds: int
    round_violations: list[list[float]] = field(default_factory=list)
    verification: VerificationReport | None = None

    @property
    def verified(self) -> bool:
        return self.verification is not None and self.verification.clean

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TighteningReport":
        data = dict(data)
        ver = data.pop("verification", None)
        return cls(**data, verification=None if ver is None else VerificationReport(**ver))


def _run(scheme, plant, grid, master_seed, seeds_per_point, additive_modes, workers, violation_tol):
    summaries = run_batch_grid(
        plant,
        scheme,
        grid,
        master_seed,
        seeds_per_point=seeds_per_point,
        workers=workers,
        additive_modes=additive_modes,
        violation_tol=violation_tol,
    )
    return VerificationReport.from_summaries(summaries, plant.model.n_c)


def verify_tightening(
    scheme: SchemeConfig,
    plant: PlantSim,
    grid=None,
    master_seed: int = 0,
    seeds_per_point: int = 1,
    additive_modes=None,
    workers: int | None = None,
    violation_tol: float = 1e-6,
) -> VerificationReport:
    """Rerun the grid with the scheme's current ``delta``.

    Violations are always measured on the original constraints.
    """
    grid = calibration_grid(plant.decl) if grid is None else grid
    return _run(scheme, plant, grid, master_seed, seeds_per_point, additive_modes, workers, violation_tol)


def calibrate_tightening(
    scheme: SchemeConfig,
    plant: PlantSim,
    grid=None,
    safety_factor: float = 1.0,
    master_seed: int = 0,
    seeds_per_point: int = 1,
    additive_modes=ADDITIVE_MODES,
    precision: float | None = None,
    max_rounds: int = 5,
    workers: int | None = None,
    violation_tol: float = 1e-6,
) -> TighteningReport:
    """Derive back-offs from closed-loop violations.

    Round 1 runs the scheme with ``delta = 0``. Each later round reruns the
    grid with the current ``delta`` and, if violations persist, adds their
    maxima to the requirement. Stops once a round is clean or after
    ``max_rounds``; the last round's run is the verification.

    Args:
        scheme: Scheme whose ancillary weights are final; its ``delta`` is ignored.
        plant: Plant template; the grid sets its true parameters.
        grid: Sample counts per dimension or explicit points (default:
            parametric box vertices plus nominal).
        safety_factor: Multiplier on the observed maxima.
        master_seed: Seed for the per-episode noise streams.
        seeds_per_point: Replicates per grid point and additive mode.
        additive_modes: Additive noise modes to run at each point.
        precision: ``delta`` is rounded up to a multiple of this (``None``: no rounding).
        max_rounds: Upper bound on closed-loop grid runs.
    """
    if safety_factor < 0:
        raise ValueError("safety_factor must be nonnegative")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    grid = calibration_grid(plant.decl) if grid is None else grid
    n_c = plant.model.n_c
    names = list(plant.model.constraint_names)
    requirement = np.zeros(n_c)
    delta = np.zeros(n_c)
    history = []
    for rounds in range(1, max_rounds + 1):
        report = _run(
            with_delta(scheme, delta), plant, grid, master_seed, seeds_per_point,
            additive_modes, workers, violation_tol,
        )
        observed = np.asarray(report.max_violation, dtype=float)
        history.append(observed.tolist())
        logger.info("calibration round %d: delta %s, max violation %s", rounds, delta, observed)
        if report.clean:
            break
        requirement = requirement + np.where(observed > violation_tol, observed, 0.0)
        delta = np.array([round_up(safety_factor * m, precision) for m in requirement])
    if not report.clean:
        logger.warning("violations persisted for %d rounds; the final delta is unverified", max_rounds)
    return TighteningReport(
        constraint_names=names,
        max_violation=requirement.tolist(),
        delta=delta.tolist(),
        safety_factor=float(safety_factor),
        precision=precision,
        rounds=rounds,
        round_violations=history,
        verification=report if report.clean else None,
    )
