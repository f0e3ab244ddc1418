import numpy as np
import pytest

from tems.model import (
    EconomicCost,
    ModelError,
    ModelSpec,
    RK4Discretization,
    StateBound,
    UncertaintyDecl,
    benchmark_reactor,
    evaluate_constraints,
    get_model,
    integrate_rk4,
    scalar_linear,
    step,
)


def test_step_scalar_affine():
    model, _ = scalar_linear(input_bounds=(-5.0, 5.0))
    assert step(model, [1.0], [2.0], [0.5])[0] == pytest.approx(3.5)


def test_step_benchmark_hand_evaluation():
    model, _ = benchmark_reactor()
    np.testing.assert_allclose(step(model, [1.0, 0.0], [0.0], [1.0, 0.0]), [0.9, 0.1], atol=1e-15)
    np.testing.assert_allclose(step(model, [1.0, 0.0], [0.0], [1.0, 0.01]), [0.9, 0.11], atol=1e-15)


def test_step_rejects_bad_shapes():
    model, _ = benchmark_reactor()
    with pytest.raises(ModelError):
        step(model, [1.0], [0.0], [1.0, 0.0])
    with pytest.raises(ModelError):
        step(model, [1.0, 0.0], [0.0, 1.0], [1.0, 0.0])


def test_step_rejects_non_finite_successor():
    def f(x, u, d):
        return x / 0.0

    model = ModelSpec("bad", 1, 1, 1, f, input_bounds=[(0.0, 1.0)])
    with np.errstate(divide="ignore", invalid="ignore"), pytest.raises(ModelError):
        step(model, [1.0], [0.0], [0.0])


def test_rk4_exponential_decay():
    out = integrate_rk4(lambda x, u, d: -x, np.array([1.0]), None, None, 0.1)
    assert abs(out[0] - np.exp(-0.1)) < 1e-6


def test_rk4_trivial_fields():
    x = np.array([0.3, -2.0])
    np.testing.assert_array_equal(integrate_rk4(lambda x, u, d: 0.0 * x, x, None, None, 0.7), x)
    out = integrate_rk4(lambda x, u, d: u + 0.0 * x, np.array([0.0]), np.array([1.0]), None, 0.5)
    assert out[0] == 0.5


def test_rk4_polynomial_exact():
    # dx/dt = t^3 via an augmented clock state; RK4 integrates cubics exactly
    def ode(x, u, d):
        return np.array([x[1] ** 3, 1.0])

    out = RK4Discretization(ode, 0.5)(np.array([0.0, 0.0]), None, None)
    assert out[0] == pytest.approx(0.5**4 / 4, abs=1e-15)


def test_rk4_rejects_nonpositive_dt():
    with pytest.raises(ModelError):
        integrate_rk4(lambda x, u, d: x, np.ones(1), None, None, 0.0)


@pytest.mark.parametrize(
    "ca, delta, expected",
    [(0.9, 0.0, -0.1), (1.2, 0.0, 0.2), (0.97, 0.05, 0.02)],
)
def test_evaluate_constraints(ca, delta, expected):
    model, _ = benchmark_reactor()
    out = evaluate_constraints(model, [ca, 0.0], [0.0], [delta])
    assert out[0] == pytest.approx(expected, abs=1e-12)


def test_evaluate_constraints_rejects_negative_delta():
    model, _ = benchmark_reactor()
    with pytest.raises(ModelError):
        evaluate_constraints(model, [0.5, 0.0], [0.0], [-0.1])


def test_benchmark_declaration():
    model, decl = benchmark_reactor()
    assert (model.n_x, model.n_u, model.n_d, model.n_c) == (2, 1, 2, 1)
    np.testing.assert_array_equal(model.input_bounds, [[0.0, 2.0]])
    np.testing.assert_array_equal(decl.lower, [0.5, -0.01])
    np.testing.assert_array_equal(decl.upper, [1.5, 0.01])
    np.testing.assert_array_equal(decl.significant, [True, False])
    np.testing.assert_array_equal(decl.additive, [False, True])
    assert model.constraint_names == ("c_A_max",)


def test_dynamics_broadcast_matches_rows():
    model, _ = benchmark_reactor()
    rng = np.random.default_rng(0)
    X, U, D = rng.random((5, 2)), rng.random((5, 1)), rng.random((5, 2))
    batched = model.dynamics(X, U, D)
    rows = np.array([step(model, X[i], U[i], D[i]) for i in range(5)])
    np.testing.assert_array_equal(batched, rows)


def test_uncertainty_decl_validation():
    with pytest.raises(ModelError):
        UncertaintyDecl([0.0], [1.0], [0.5], [True])
    with pytest.raises(ModelError):
        UncertaintyDecl([2.0], [0.0], [1.0], [True])
    with pytest.raises(ModelError):
        UncertaintyDecl([0.0, 0.0], [0.0], [1.0], [True])


def test_input_bounds_must_be_finite():
    with pytest.raises(ModelError):
        ModelSpec("m", 1, 1, 1, lambda x, u, d: x, input_bounds=[(0.0, np.inf)])


def test_state_bound_and_economic_cost():
    g = StateBound(0, 1.0)
    assert g(np.array([1.5, 0.0]), None) == 0.5
    assert StateBound(0, 1.0, upper=False)(np.array([0.25]), None) == 0.75
    cost = EconomicCost(product_index=1, move_weights=(0.1,))
    assert cost(np.array([0.0, 2.0]), np.array([1.0]), np.array([0.0])) == pytest.approx(-1.9)


def test_get_model_unknown():
    with pytest.raises(ModelError):
        get_model("no_such_model")
