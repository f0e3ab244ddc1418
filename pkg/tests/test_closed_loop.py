import numpy as np
import pytest

from tems.closed_loop import (
    COMPLETED,
    CONSTANT_LOWER,
    CONSTANT_UPPER,
    ERROR,
    ClosedLoopTrace,
    PlantSim,
    StateTarget,
    compare_schemes,
    episode_metrics,
    episode_seed,
    grid_points,
    make_tasks,
    run_batch_grid,
    run_episode,
)
from tems.controllers import MULTI_STAGE, TEMS, TUBE, AncillaryConfig, SolverOptions, make_scheme
from tems.estimator import BOX, FINITE, EstimatorConfig, propagate_primary
from tems.model import benchmark_reactor

TIGHT = SolverOptions(tol=1e-10)


def _plant(decl_model=None, **kw):
    model, decl = decl_model or benchmark_reactor()
    kw.setdefault("max_steps", 12)
    kw.setdefault("stop", StateTarget(1, 0.8))
    return PlantSim(model, decl, **kw)


def _tems(model, decl, kind=BOX, N=6, **kw):
    return make_scheme(
        TEMS, model, decl, N,
        ancillary=AncillaryConfig(Q=(1.0, 1.0), R=(1.0,), solver=TIGHT),
        estimator=EstimatorConfig(kind, (1e-4, 0.0)),
        delta=kw.pop("delta", np.array([0.05])),
        solver=TIGHT,
        **kw,
    )


def test_zero_uncertainty_primary_tracks_plant_exactly():
    model, decl = benchmark_reactor(k_bounds=(1.0, 1.0), w_bound=0.0)
    plant = _plant((model, decl))
    tems = run_episode(plant, _tems(model, decl, delta=np.zeros(1)), seed=3)
    assert tems.T > 0
    np.testing.assert_array_equal(tems.z, tems.x)
    np.testing.assert_array_equal(tems.u, tems.v0)
    ms = run_episode(plant, make_scheme(MULTI_STAGE, model, decl, 6, solver=TIGHT), seed=3)
    np.testing.assert_array_equal(ms.x, tems.x)
    np.testing.assert_array_equal(ms.u, tems.u)


@pytest.mark.parametrize("kind", [FINITE, BOX])
def test_primary_recomputation_invariant(kind):
    model, decl = benchmark_reactor()
    trace = run_episode(_plant(true_params=[1.3, 0.0]), _tems(model, decl, kind), seed=5)
    assert trace.T >= 2
    np.testing.assert_array_equal(trace.z[0], trace.x[0])
    for t in range(1, trace.z.shape[0]):
        z = propagate_primary(model, trace.z[t - 1], trace.v0[t - 1], trace.dbar[t])
        np.testing.assert_array_equal(trace.z[t], z)


def test_trace_shapes_and_input_set():
    model, decl = benchmark_reactor()
    trace = run_episode(_plant(true_params=[0.7, 0.0]), _tems(model, decl), seed=1)
    T = trace.T
    assert trace.x.shape == (T + 1, 2) and trace.z.shape == (T + 1, 2)
    assert trace.u.shape == (T, 1) and trace.v0.shape == (T, 1) and trace.d.shape == (T, 2)
    assert trace.viol.shape == (T + 1, 1) and trace.dbar.shape == (T + 1, 2)
    assert len(trace.t_primary) == len(trace.t_ancillary) == len(trace.t_estimator) == T
    assert np.all(np.isnan(trace.dbar[0]))
    lo, hi = model.input_bounds[:, 0], model.input_bounds[:, 1]
    assert np.all(trace.u >= lo) and np.all(trace.u <= hi)
    np.testing.assert_array_equal(trace.viol, np.maximum(trace.x[:, :1] - 1.0, 0.0))


def test_plant_disturbances_stay_in_box_and_are_seeded():
    model, decl = benchmark_reactor()
    plant = _plant(true_params=[1.2, 0.0])
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    draws = np.array([plant.draw(rng_a) for _ in range(200)])
    np.testing.assert_array_equal(draws, [plant.draw(rng_b) for _ in range(200)])
    assert np.all(draws[:, 0] == 1.2)
    assert np.all(np.abs(draws[:, 1]) <= 0.01)
    assert plant.with_params([1.2, 0.0], additive_mode=CONSTANT_LOWER).draw(rng_a)[1] == -0.01
    assert plant.with_params([1.2, 0.0], additive_mode=CONSTANT_UPPER).draw(rng_a)[1] == 0.01


def test_plant_rejects_params_outside_box():
    with pytest.raises(ValueError):
        _plant(true_params=[2.0, 0.0])
    with pytest.raises(ValueError):
        _plant(additive_mode="gaussian")


def test_episode_is_deterministic():
    model, decl = benchmark_reactor()
    scheme = _tems(model, decl)
    a = run_episode(_plant(true_params=[0.9, 0.0]), scheme, seed=11)
    b = run_episode(_plant(true_params=[0.9, 0.0]), scheme, seed=11)
    for name in ("x", "z", "u", "v0", "dbar", "d", "viol"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_stage_one_child_matches_finite_estimate():
    model, decl = benchmark_reactor()
    scheme = _tems(model, decl, FINITE)
    trace = run_episode(_plant(true_params=[1.5, 0.0]), scheme, seed=2)
    real = scheme.primary.tree.realizations.vectors
    for t in range(1, trace.T):
        r = next(i for i, d in enumerate(real) if np.array_equal(d, trace.dbar[t]))
        np.testing.assert_allclose(trace.z[t], trace.stage1[t - 1][r], atol=1e-6)


def test_stop_predicate_and_step_cap():
    model, decl = benchmark_reactor()
    trace = run_episode(_plant(max_steps=40), _tems(model, decl), seed=0)
    assert trace.reached_target and trace.x[-1, 1] >= 0.8
    assert np.all(trace.x[:-1, 1] < 0.8)
    short = run_episode(_plant(max_steps=3), _tems(model, decl), seed=0)
    assert short.T == 3 and not short.reached_target and short.status == COMPLETED


def test_violation_metrics_on_synthetic_trace():
    viol = np.array([[0.0], [2e-6], [5e-7], [0.3]])
    trace = ClosedLoopTrace(
        x=np.zeros((4, 2)), z=np.zeros((4, 2)), u=np.zeros((3, 1)), v0=np.zeros((3, 1)),
        dbar=np.zeros((4, 2)), d=np.zeros((3, 2)), viol=viol,
        t_primary=np.array([0.001, 0.002, 0.003]), t_ancillary=np.zeros(3), t_estimator=np.zeros(3),
    )
    m = episode_metrics(trace)
    assert m["steps"] == 3
    assert m["violating_steps"] == [2]
    assert m["max_violation"] == [0.3]
    assert m["mean_iteration_ms"] == pytest.approx(2.0)


def test_grid_points():
    _, decl = benchmark_reactor()
    pts = grid_points(decl, {"k": 10})
    assert pts.shape == (10, 2)
    np.testing.assert_allclose(pts[:, 0], np.linspace(0.5, 1.5, 10))
    np.testing.assert_array_equal(grid_points(decl, {"k": 1}), [decl.nominal])
    with pytest.raises(ValueError):
        grid_points(decl, {"w": 3})
    with pytest.raises(ValueError):
        grid_points(decl, [[3.0, 0.0]])


def test_make_tasks_counts_and_seeds():
    model, decl = benchmark_reactor()
    tasks = make_tasks(_plant(), _tems(model, decl), {"k": 10}, 2024, seeds_per_point=10)
    assert len(tasks) == 100
    assert [t.seed for t in tasks] == [episode_seed(2024, i) for i in range(100)]
    assert len({t.seed for t in tasks}) == 100
    assert episode_seed(2024, 5) == episode_seed(2024, 5) != episode_seed(2025, 5)


def test_batch_grid_is_reproducible():
    model, decl = benchmark_reactor()
    scheme = _tems(model, decl, N=4)
    a = run_batch_grid(_plant(max_steps=5), scheme, {"k": 3}, 7)
    b = run_batch_grid(_plant(max_steps=5), scheme, {"k": 3}, 7)
    assert len(a) == 3
    strip = lambda s: {k: v for k, v in s.to_dict().items() if not k.startswith("mean_")}  # noqa: E731
    assert [strip(s) for s in a] == [strip(s) for s in b]


def test_batch_records_episode_errors():
    model, decl = benchmark_reactor()
    scheme = _tems(model, decl, N=4)
    bad = PlantSim(model, decl, max_steps=3, x0=np.array([np.nan, 0.0]))
    (summary,) = run_batch_grid(bad, scheme, {"k": 1}, 0)
    assert summary.status == ERROR and summary.message


def test_compare_identical_schemes_give_identical_rows():
    model, decl = benchmark_reactor()
    a = _tems(model, decl, N=4, name="A")
    b = _tems(model, decl, N=4, name="B")
    tube = make_scheme(TUBE, model, decl, 4, delta=np.array([0.05]), solver=TIGHT)
    table, by = compare_schemes([a, b, tube], _plant(max_steps=6), {"k": 3}, 1)
    ra, rb = table.rows[0], table.rows[1]
    assert (ra.avg_steps, ra.violating_episodes, ra.failed) == (rb.avg_steps, rb.violating_episodes, rb.failed)
    assert table.rows[2].scenarios == 1
    assert set(by) == {"A", "B", "tube"}
    text = table.to_text()
    assert "avg. steps to target" in text and "scenarios" in text
