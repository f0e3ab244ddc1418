import numpy as np
import pytest

from oracles import scalar_lq_rollout, scalar_tree_grid_search
from tems.controllers import (
    FULL_TREE,
    MULTI_STAGE,
    NOMINAL_ONLY,
    TEMS,
    TUBE,
    AncillaryConfig,
    ConfigError,
    InfeasibleError,
    PrimaryConfig,
    PrimaryController,
    SolverOptions,
    TreeTrajectory,
    ancillary_solve,
    make_baseline,
    make_scheme,
    primary_solve,
    tighten_constraints,
    tighten_interval,
)
from tems.estimator import FINITE
from tems.model import (
    QuadraticCost,
    QuadraticTerminal,
    StateBound,
    UncertaintyDecl,
    benchmark_reactor,
    scalar_linear,
)
from tems.scenario_tree import RealizationSet, build_tree, sample_box_vertices

# Original bounds, back-offs and printed primary bounds of the polymerization example.
TABLE1 = [
    ((88.0, 92.0), (0.3, 0.3), (88.3, 91.7)),
    ((0.0, 109.0), (1.0, 1.0), (1.0, 108.0)),
    ((0.0, 30000.0), (0.0, 10.0), (0.0, 29990.0)),
    ((60.0, 100.0), (1.0, 1.0), (61.0, 99.0)),
    ((60.0, 100.0), (1.0, 1.0), (61.0, 99.0)),
]

TIGHT = SolverOptions(tol=1e-10)


@pytest.mark.parametrize("interval, delta, expected", TABLE1)
def test_tighten_interval_table_rows(interval, delta, expected):
    assert tighten_interval(interval, *delta) == expected


def test_tighten_constraints_box_and_identity():
    box = np.array([row[0] for row in TABLE1])
    delta = np.array([row[1] for row in TABLE1])
    np.testing.assert_array_equal(tighten_constraints(box, delta), [row[2] for row in TABLE1])
    np.testing.assert_array_equal(tighten_constraints(box, np.zeros(2)), box)


def test_tighten_constraints_functions():
    g = (StateBound(0, 1.0),)
    (tg,) = tighten_constraints(g, [0.05])
    assert tg(np.array([0.97]), None) == pytest.approx(0.02)
    assert g[0](np.array([0.97]), None) < 0


def test_tighten_errors():
    with pytest.raises(ConfigError):
        tighten_interval((0.0, 1.0), 0.6, 0.6)
    with pytest.raises(ConfigError):
        tighten_interval((0.0, 1.0), -0.1, 0.0)
    with pytest.raises(ConfigError):
        tighten_constraints((StateBound(0, 1.0),), [0.1, 0.2])


def _lq_config(N, tree=None):
    model, decl = scalar_linear(input_bounds=(-10.0, 10.0))
    tree = tree or build_tree(RealizationSet.nominal_only(decl), N, 1)
    cfg = PrimaryConfig(tree, QuadraticCost((1.0,), (1.0,)), QuadraticTerminal((1.0,)), solver=TIGHT)
    return model, cfg


def test_primary_riccati_two_steps():
    model, cfg = _lq_config(2)
    traj = primary_solve(cfg, model, [1.0])
    assert traj.status == "optimal"
    assert traj.inputs[0, 0] == pytest.approx(-0.6, abs=1e-6)
    assert traj.states[1, 0] == pytest.approx(0.4, abs=1e-6)
    assert traj.inputs[1, 0] == pytest.approx(-0.2, abs=1e-6)


@pytest.mark.parametrize("N", [1, 3, 6])
def test_primary_matches_riccati_recursion(N):
    model, cfg = _lq_config(N)
    traj = primary_solve(cfg, model, [2.0])
    u, x = scalar_lq_rollout(1.0, 1.0, 1.0, 1.0, 1.0, N, 2.0)
    np.testing.assert_allclose(traj.inputs.ravel(), u, atol=1e-6)
    np.testing.assert_allclose(traj.states.ravel(), x, atol=1e-6)


@pytest.mark.parametrize("x_max", [None, 0.6])
def test_primary_matches_grid_search(x_max):
    model, decl = scalar_linear(x_max=x_max)
    tree = build_tree(sample_box_vertices(decl), 2, 1)
    cfg = PrimaryConfig(tree, QuadraticCost((1.0,), (1.0,)), QuadraticTerminal((1.0,)), solver=TIGHT)
    traj = primary_solve(cfg, model, [1.0])
    best, _ = scalar_tree_grid_search(1.0, tree.realizations.vectors.ravel(), x_max=x_max)
    assert abs(traj.objective - best) <= 1e-3
    # the continuous optimum can never be worse than a grid point
    assert traj.objective <= best + 1e-9


def test_primary_single_root_input_on_branching_tree():
    model, decl = benchmark_reactor()
    tree = build_tree(sample_box_vertices(decl), 5, 1)
    traj = primary_solve(PrimaryConfig(tree, model.stage_cost, solver=TIGHT), model, [0.2, 0.0])
    assert traj.inputs.shape == (tree.n_nonleaf, 1)
    assert traj.root_input.shape == (1,)
    assert traj.dynamics_residual(model) < 1e-8


def test_primary_respects_tightened_constraint():
    model, decl = benchmark_reactor()
    tree = build_tree(sample_box_vertices(decl), 10, 1)
    cfg = PrimaryConfig(tree, model.stage_cost, delta=np.array([0.05]), solver=TIGHT)
    traj = primary_solve(cfg, model, [0.5, 0.0])
    assert np.all(traj.states[1:, 0] <= 0.95 + 1e-6)
    # the constraint is active somewhere, otherwise the check is vacuous
    assert np.max(traj.states[1:, 0]) > 0.94


def test_primary_infeasible_is_reported():
    model, decl = benchmark_reactor()
    tree = build_tree(RealizationSet.nominal_only(decl), 3, 1)
    ctrl = PrimaryController(PrimaryConfig(tree, model.stage_cost, delta=np.array([0.05])), model)
    # c_A = 3 cannot decay below 0.95 in one step even with zero feed
    with pytest.raises(InfeasibleError):
        ctrl.solve([3.0, 0.0])


def test_primary_config_set_checks():
    model, decl = benchmark_reactor()
    tree = build_tree(RealizationSet.nominal_only(decl), 3, 1)
    with pytest.raises(ConfigError):
        PrimaryConfig(tree, model.stage_cost, input_box=np.array([[0.0, 3.0]])).resolved(model)
    with pytest.raises(ConfigError):
        PrimaryConfig(tree, model.stage_cost, delta=np.array([-0.1])).resolved(model)


def test_ancillary_exact_tracking():
    model, decl = benchmark_reactor()
    tree = build_tree(sample_box_vertices(decl), 10, 1)
    ref = primary_solve(PrimaryConfig(tree, model.stage_cost, solver=TIGHT), model, [0.2, 0.1])
    cfg = AncillaryConfig(NOMINAL_ONLY, Q=(1.0, 1.0), R=(1.0,), solver=TIGHT)
    res = ancillary_solve(cfg, model, [0.2, 0.1], ref, nominal=decl.nominal)
    np.testing.assert_array_equal(res.input, ref.root_input)
    assert res.trajectory.objective == pytest.approx(0.0, abs=1e-12)


def test_ancillary_full_tree_exact_tracking():
    model, decl = benchmark_reactor()
    tree = build_tree(sample_box_vertices(decl), 6, 1)
    ref = primary_solve(PrimaryConfig(tree, model.stage_cost, solver=TIGHT), model, [0.2, 0.1])
    cfg = AncillaryConfig(FULL_TREE, Q=(1.0, 1.0), R=(1.0,), solver=TIGHT)
    res = ancillary_solve(cfg, model, [0.2, 0.1], ref)
    np.testing.assert_allclose(res.input, ref.root_input, atol=1e-8)


def test_ancillary_scalar_hand_minimum():
    model, decl = scalar_linear()
    tree = build_tree(RealizationSet.nominal_only(decl), 1, 1)
    ref = TreeTrajectory(tree, np.zeros((2, 1)), np.zeros((1, 1)), 0.0)
    cfg = AncillaryConfig(Q=(1.0,), R=(1.0,), P=(1.0,), solver=TIGHT)
    # 1 + u^2 + (1 + u)^2 is minimal at u = -0.5
    assert ancillary_solve(cfg, model, [1.0], ref).input[0] == pytest.approx(-0.5, abs=1e-8)


def test_ancillary_input_projection():
    model, decl = scalar_linear(input_bounds=(0.0, 2.0))
    tree = build_tree(RealizationSet.nominal_only(decl), 1, 1)
    ref = TreeTrajectory(tree, np.zeros((2, 1)), np.full((1, 1), 3.0), 0.0)
    cfg = AncillaryConfig(Q=(0.0,), R=(1.0,), P=(0.0,))
    assert ancillary_solve(cfg, model, [1.0], ref).input[0] == 2.0


def test_ancillary_weight_validation():
    model, _ = benchmark_reactor()
    with pytest.raises(ConfigError):
        AncillaryConfig(Q=(1.0, -1.0), R=(1.0,)).matrices(model)
    with pytest.raises(ConfigError):
        AncillaryConfig(Q=np.array([[1.0, 2.0], [0.0, 1.0]]), R=(1.0,)).matrices(model)
    with pytest.raises(ConfigError):
        AncillaryConfig(mode="sideways").matrices(model)


def test_scheme_scenario_counts():
    model, decl = benchmark_reactor()
    assert make_scheme(TEMS, model, decl, 10).n_scenarios == 3
    assert make_scheme(TUBE, model, decl, 10).n_scenarios == 1
    assert make_scheme(MULTI_STAGE, model, decl, 10).n_scenarios == 9
    assert make_baseline(TUBE, model, decl, 10).n_scenarios == 1


def test_multi_stage_over_three_uncertainties():
    model, _ = scalar_linear()
    decl = UncertaintyDecl([0.0, 0.0, 0.0], [-1.0] * 3, [1.0] * 3, [True, False, False])
    model = type(model)(
        "three", 1, 1, 3, lambda x, u, d: x + u + d[..., :1] + d[..., 1:2] + d[..., 2:3],
        input_bounds=[(-1.0, 1.0)], stage_cost=QuadraticCost((1.0,), (1.0,)),
    )
    assert make_baseline(MULTI_STAGE, model, decl, 3).n_scenarios == 27


def test_scheme_roles():
    model, decl = benchmark_reactor()
    ms = make_baseline(MULTI_STAGE, model, decl, 10, delta=np.array([0.1]))
    assert ms.ancillary is None and ms.primary.delta is None
    tube = make_scheme(TUBE, model, decl, 10, ancillary=AncillaryConfig(FULL_TREE, (1.0, 1.0), (1.0,)))
    assert tube.ancillary.mode == NOMINAL_ONLY
    assert tube.estimator.kind == FINITE
    with pytest.raises(ConfigError):
        make_scheme("robust", model, decl, 10)
