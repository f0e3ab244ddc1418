"""Uncertain discrete-time models ``x+ = f(x, u, d)`` and built-in instances.

Model functions (dynamics, constraints, costs) receive arrays whose last axis
is the state/input/uncertainty dimension and must broadcast over any leading
batch axes. The transcription evaluates a whole scenario tree in one call that
way, and the forward-mode derivatives in :mod:`tems.nlp.autodiff` pass through
the same code path.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Dynamics = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
ConstraintFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Raised on dimension mismatches or non-finite model evaluations."""


def _as_bounds(bounds, n: int, name: str) -> np.ndarray:
    if bounds is None:
        out = np.tile([-np.inf, np.inf], (n, 1))
    else:
        out = np.array(bounds, dtype=float).reshape(n, 2)
    if np.any(out[:, 0] > out[:, 1]):
        raise ModelError(f"{name}: lower bound exceeds upper bound")
    return out


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Uncertain system with its constraint sets.

    Attributes:
        name: Registry name.
        n_x, n_u, n_d: State, input and uncertainty dimensions.
        f: Discrete-time dynamics ``f(x, u, d)``.
        input_bounds: ``(n_u, 2)`` closed intervals (the compact set U).
        state_bounds: ``(n_x, 2)`` intervals of the box part of X; infinite
            entries mean unbounded.
        constraints: Scalar functions ``g_i(x, u)``, satisfied iff ``<= 0``.
        constraint_names: Labels for ``constraints``.
        dt: Sampling interval.
        x0: Default initial state.
        stage_cost: Native economic stage cost ``l(x, u, u_prev)``, if any.
        vectorized: False when ``f``/``g_i`` only accept single vectors; they
            are then looped over batch axes.
    """

    name: str
    n_x: int
    n_u: int
    n_d: int
    f: Dynamics
    input_bounds: np.ndarray
    state_bounds: np.ndarray | None = None
    constraints: tuple[ConstraintFn, ...] = ()
    constraint_names: tuple[str, ...] = ()
    dt: float = 1.0
    x0: np.ndarray | None = None
    stage_cost: Callable | None = None
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    vectorized: bool = True

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        ub = _as_bounds(self.input_bounds, self.n_u, "input_bounds")
        if not np.all(np.isfinite(ub)):
            raise ModelError("input_bounds must be finite on both sides")
        set_("input_bounds", ub)
        set_("state_bounds", _as_bounds(self.state_bounds, self.n_x, "state_bounds"))
        set_("constraints", tuple(self.constraints))
        names = tuple(self.constraint_names) or tuple(
            f"g{i}" for i in range(len(self.constraints))
        )
        if len(names) != len(self.constraints):
            raise ModelError("constraint_names length differs from constraints")
        set_("constraint_names", names)
        set_("x0", np.zeros(self.n_x) if self.x0 is None else np.asarray(self.x0, float))
        set_("state_names", tuple(self.state_names) or tuple(f"x{i}" for i in range(self.n_x)))
        set_("input_names", tuple(self.input_names) or tuple(f"u{i}" for i in range(self.n_u)))
        if self.dt <= 0:
            raise ModelError("dt must be positive")

    @property
    def n_c(self) -> int:
        return len(self.constraints)

    def dynamics(self, x, u, d):
        """Evaluate ``f`` on (possibly batched) arguments without checks."""
        if self.vectorized:
            return self.f(x, u, d)
        return _loop_batched(self.f, self.n_x, x, u, d)

    def constraint_values(self, x, u):
        """Stack all ``g_i(x, u)`` along a trailing axis."""
        if not self.constraints:
            return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (0,))
        if self.vectorized:
            vals = [g(x, u) for g in self.constraints]
        else:
            vals = [_loop_batched(g, None, x, u) for g in self.constraints]
        return np.stack(vals, axis=-1)


def _loop_batched(fn, n_out, *args):
    batch = np.broadcast_shapes(*(np.shape(a)[:-1] for a in args))
    if batch == ():
        return fn(*args)
    args = [np.broadcast_to(a, batch + np.shape(a)[-1:]) for a in args]
    flat = [a.reshape(-1, a.shape[-1]) for a in args]
    out = [fn(*row) for row in zip(*flat)]
    return np.asarray(out, dtype=float).reshape(batch + np.shape(out[0]))


@dataclass(frozen=True, eq=False)
class UncertaintyDecl:
    """Box uncertainty set ``D = {d | lower <= d <= upper}``.

    ``significant`` marks the dimensions that span the primary scenario tree.
    ``additive`` marks per-step disturbances; the others are parameters held
    constant over an episode.
    """

    nominal: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    significant: np.ndarray
    additive: np.ndarray = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        nom = np.atleast_1d(np.asarray(self.nominal, float))
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        sig = np.atleast_1d(np.asarray(self.significant, bool))
        add = (
            np.zeros(nom.shape, bool)
            if self.additive is None
            else np.atleast_1d(np.asarray(self.additive, bool))
        )
        if not (nom.shape == lo.shape == hi.shape == sig.shape == add.shape):
            raise ModelError("uncertainty vectors must share one length")
        if np.any(lo > hi):
            raise ModelError("uncertainty lower bound exceeds upper bound")
        if np.any(nom < lo) or np.any(nom > hi):
            raise ModelError("nominal uncertainty lies outside its box")
        set_("nominal", nom)
        set_("lower", lo)
        set_("upper", hi)
        set_("significant", sig)
        set_("additive", add)
        set_("names", tuple(self.names) or tuple(f"d{i}" for i in range(nom.size)))

    @property
    def n_d(self) -> int:
        return self.nominal.size

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())

    def contains(self, d, atol: float = 0.0) -> bool:
        d = np.asarray(d, float)
        return bool(np.all(d >= self.lower - atol) and np.all(d <= self.upper + atol))


def _check_vec(v, n: int, what: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (n,):
        raise ModelError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def step(model: ModelSpec, x, u, d) -> np.ndarray:
    """One step of the uncertain dynamics, ``x+ = f(x, u, d)``."""
    x = _check_vec(x, model.n_x, "state")
    u = _check_vec(u, model.n_u, "input")
    d = _check_vec(d, model.n_d, "uncertainty")
    out = np.asarray(model.dynamics(x, u, d), dtype=float)
    if out.shape != (model.n_x,):
        raise ModelError(f"dynamics returned shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ModelError(f"non-finite successor state {out} from x={x}, u={u}, d={d}")
    return out


def integrate_rk4(ode, x, u, d, dt: float):
    """Classical fourth-order Runge-Kutta step with ``u`` and ``d`` held.

    Works on batched arrays and on :class:`~tems.nlp.autodiff.Dual` values.
    """
    if dt <= 0:
        raise ModelError("dt must be positive")
    k1 = ode(x, u, d)
    k2 = ode(x + 0.5 * dt * k1, u, d)
    k3 = ode(x + 0.5 * dt * k2, u, d)
    k4 = ode(x + dt * k3, u, d)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if isinstance(out, np.ndarray) and not np.all(np.isfinite(out)):
        raise ModelError("non-finite Runge-Kutta stage")
    return out


@dataclass(frozen=True)
class RK4Discretization:
    """Wraps continuous dynamics ``dx/dt = ode(x, u, d)`` as one RK4 step."""

    ode: Callable
    dt: float

    def __call__(self, x, u, d):
        return integrate_rk4(self.ode, x, u, d, self.dt)


def evaluate_constraints(model: ModelSpec, x, u, delta=None) -> np.ndarray:
    """Residuals ``g_i(x, u) + delta_i``; an entry ``<= 0`` is satisfied."""
    x = _check_vec(x, model.n_x, "state")
    u = _check_vec(u, model.n_u, "input")
    if delta is None:
        delta = np.zeros(model.n_c)
    delta = _check_vec(delta, model.n_c, "delta")
    if np.any(delta < 0):
        raise ModelError("tightening must be nonnegative")
    return np.asarray(model.constraint_values(x, u), dtype=float).reshape(model.n_c) + delta


# -- constraint and cost building blocks (picklable, batch-friendly) --------


@dataclass(frozen=True)
class StateBound:
    """``x[index] - limit <= 0`` (upper) or ``limit - x[index] <= 0``."""

    index: int
    limit: float
    upper: bool = True

    def __call__(self, x, u):
        xi = x[..., self.index]
        return xi - self.limit if self.upper else self.limit - xi


@dataclass(frozen=True)
class EconomicCost:
    """``-x[product] + sum_i r_i (u_i - u_prev_i)^2``."""

    product_index: int
    move_weights: tuple[float, ...]

    def __call__(self, x, u, u_prev):
        cost = -x[..., self.product_index]
        for i, r in enumerate(self.move_weights):
            if r:
                du = u[..., i] - u_prev[..., i]
                cost = cost + r * du * du
        return cost


@dataclass(frozen=True)
class QuadraticCost:
    """``(x - x_ref)' Q (x - x_ref) + (u - u_ref)' R (u - u_ref)`` with diagonal weights."""

    q: tuple[float, ...]
    r: tuple[float, ...]
    x_ref: tuple[float, ...] | None = None
    u_ref: tuple[float, ...] | None = None

    def __call__(self, x, u, u_prev=None):
        ex = x - np.asarray(self.x_ref) if self.x_ref is not None else x
        eu = u - np.asarray(self.u_ref) if self.u_ref is not None else u
        return (ex * ex * np.asarray(self.q)).sum(axis=-1) + (
            eu * eu * np.asarray(self.r)
        ).sum(axis=-1)


@dataclass(frozen=True)
class QuadraticTerminal:
    q: tuple[float, ...]

    def __call__(self, x):
        return (x * x * np.asarray(self.q)).sum(axis=-1)


# -- built-in models ---------------------------------------------------------


def _scalar_linear_f(x, u, d, a=1.0, b=1.0):
    return a * x + b * u + d


def scalar_linear(
    a: float = 1.0,
    b: float = 1.0,
    input_bounds: Sequence[float] = (-1.0, 1.0),
    d_bounds: Sequence[float] = (-0.5, 0.5),
    d_nominal: float = 0.0,
    x_max: float | None = None,
) -> tuple[ModelSpec, UncertaintyDecl]:
    """Scalar ``x+ = a x + b u + d`` with ``d`` a constant (significant) parameter."""
    constraints = (StateBound(0, x_max),) if x_max is not None else ()
    model = ModelSpec(
        name="scalar_linear",
        n_x=1,
        n_u=1,
        n_d=1,
        f=functools.partial(_scalar_linear_f, a=a, b=b),
        input_bounds=[input_bounds],
        constraints=constraints,
        constraint_names=("x_max",) if constraints else (),
        x0=[1.0],
        stage_cost=QuadraticCost(q=(1.0,), r=(1.0,)),
    )
    decl = UncertaintyDecl(
        nominal=[d_nominal],
        lower=[d_bounds[0]],
        upper=[d_bounds[1]],
        significant=[True],
        names=("d",),
    )
    return model, decl


def _reactor_f(x, u, d, dt=0.1):
    ca = x[..., 0]
    cb = x[..., 1]
    k = d[..., 0]
    w = d[..., 1]
    feed = u[..., 0]
    ca_next = ca + dt * (feed - k * ca)
    cb_next = cb + dt * k * ca + w
    return np.stack([ca_next, cb_next], axis=-1)


def benchmark_reactor(
    dt: float = 0.1,
    ca_max: float = 1.0,
    feed_max: float = 2.0,
    k_bounds: Sequence[float] = (0.5, 1.5),
    k_nominal: float = 1.0,
    w_bound: float = 0.01,
    move_weight: float = 0.1,
) -> tuple[ModelSpec, UncertaintyDecl]:
    """Two-state fed-batch reactor ``A -> B`` (Euler-discretized).

    ``c_A+ = c_A + dt (u - k c_A)`` and ``c_B+ = c_B + dt k c_A + w`` with feed
    ``u`` in ``[0, feed_max]``, safety constraint ``c_A <= ca_max``, uncertain
    rate constant ``k`` (significant) and additive product disturbance ``w``.
    The economic cost rewards product and penalizes feed moves.
    """
    model = ModelSpec(
        name="benchmark_reactor",
        n_x=2,
        n_u=1,
        n_d=2,
        f=functools.partial(_reactor_f, dt=dt),
        input_bounds=[(0.0, feed_max)],
        constraints=(StateBound(0, ca_max),),
        constraint_names=("c_A_max",),
        dt=dt,
        x0=[0.0, 0.0],
        stage_cost=EconomicCost(product_index=1, move_weights=(move_weight,)),
        state_names=("c_A", "c_B"),
        input_names=("feed",),
    )
    decl = UncertaintyDecl(
        nominal=[k_nominal, 0.0],
        lower=[k_bounds[0], -w_bound],
        upper=[k_bounds[1], w_bound],
        significant=[True, False],
        additive=[False, True],
        names=("k", "w"),
    )
    return model, decl


MODELS: dict[str, Callable[..., tuple[ModelSpec, UncertaintyDecl]]] = {
    "scalar_linear": scalar_linear,
    "benchmark_reactor": benchmark_reactor,
}


def get_model(name: str, **params) -> tuple[ModelSpec, UncertaintyDecl]:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    return factory(**params)
