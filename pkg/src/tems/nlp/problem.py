"""Smooth NLP containers, derivative helpers and the KKT residual check.

Problem form::

    min f(x)  s.t.  c_eq(x) = 0,  c_in(x) <= 0,  lower <= x <= upper

Lagrangian sign convention: ``L = f + lam_eq' c_eq + lam_in' c_in
- lam_lo' (x - lower) + lam_up' (x - upper)`` with ``lam_in, lam_lo, lam_up >= 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from tems.nlp import autodiff

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


def finite_difference_jacobian(fn, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x`` (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.ravel(fn(xp)) - np.ravel(fn(xm))) / (2.0 * h)
    return jac


def batched_jacobian(fn, *args, method: str = "ad", rel_step: float = 1e-6):
    """Value and per-row Jacobian of a batch-wise function.

    Every argument has shape ``(B, n_a)``; row ``b`` of the output depends only
    on row ``b`` of the inputs. Returns ``(value, jac)`` with
    ``jac.shape == value.shape + (sum n_a,)``.
    """
    if method == "ad":
        return autodiff.jacobian(fn, *args)
    if method != "fd":
        raise ValueError(f"unknown derivative method {method!r}")
    args = [np.asarray(a, dtype=float) for a in args]
    val = np.asarray(fn(*args), dtype=float)
    cols = []
    for ai, a in enumerate(args):
        for i in range(a.shape[-1]):
            h = rel_step * np.maximum(1.0, np.abs(a[..., i]))
            plus = [b.copy() for b in args]
            minus = [b.copy() for b in args]
            plus[ai][..., i] += h
            minus[ai][..., i] -= h
            diff = np.asarray(fn(*plus), dtype=float) - np.asarray(fn(*minus), dtype=float)
            hb = (2.0 * h).reshape(h.shape + (1,) * (diff.ndim - h.ndim))
            cols.append(diff / hb)
    return val, np.stack(cols, axis=-1)


def batched_hessian(fn, *args, method: str = "ad", rel_step: float = 1e-5):
    """Per-row second derivatives of a batch-wise function.

    Central differences of :func:`batched_jacobian`; returns
    ``value.shape + (k, k)`` with ``k = sum n_a``, symmetrized. With
    ``method="ad"`` all ``2k`` perturbed copies are stacked on a new leading
    batch axis and differentiated in a single pass, so ``fn`` must broadcast
    over extra leading axes.
    """
    args = [np.asarray(a, dtype=float) for a in args]
    sizes = [a.shape[-1] for a in args]
    k = sum(sizes)
    steps = [rel_step * np.maximum(1.0, np.abs(a)) for a in args]
    if method == "ad":
        stacked = [np.broadcast_to(a, (2, k) + a.shape).copy() for a in args]
        off = 0
        for ai, a in enumerate(args):
            for i in range(sizes[ai]):
                stacked[ai][0, off + i, ..., i] += steps[ai][..., i]
                stacked[ai][1, off + i, ..., i] -= steps[ai][..., i]
            off += sizes[ai]
        _, jac = autodiff.jacobian(fn, *stacked)
        diff = jac[0] - jac[1]
        h = np.concatenate([2.0 * s for s in steps], axis=-1)
        h = np.moveaxis(h, -1, 0).reshape((k,) + h.shape[:-1] + (1,) * (diff.ndim - h.ndim))
        hess = np.moveaxis(diff / h, 0, -1)
        return 0.5 * (hess + np.swapaxes(hess, -1, -2))
    cols = []
    for ai, a in enumerate(args):
        for i in range(sizes[ai]):
            h = steps[ai][..., i]
            plus = [b.copy() for b in args]
            minus = [b.copy() for b in args]
            plus[ai][..., i] += h
            minus[ai][..., i] -= h
            _, jp = batched_jacobian(fn, *plus, method=method)
            _, jm = batched_jacobian(fn, *minus, method=method)
            hb = (2.0 * h).reshape(h.shape + (1,) * (jp.ndim - h.ndim))
            cols.append((jp - jm) / hb)
    hess = np.stack(cols, axis=-1)
    return 0.5 * (hess + np.swapaxes(hess, -1, -2))


def _dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)


@dataclass(eq=False)
class NlpProblem:
    """A smooth NLP.

    Derivative callbacks are optional; missing ones are obtained by
    forward-mode AD (``derivatives="ad"``) or central differences (``"fd"``).
    Jacobian callbacks may return dense arrays or scipy sparse matrices.

    ``partition`` optionally describes the Lagrangian as a sum of element
    functions: a list of integer arrays of shape ``(n_e, m)`` (element-wise
    variable indices). ``element_gradients(x, lam_eq, lam_in)`` then returns
    the matching list of ``(n_e, m)`` gradients of the nonlinear Lagrangian
    parts. The SQP solver keeps one small quasi-Newton matrix per element.
    ``element_hessians(x, lam_eq, lam_in)`` may supply the matching exact
    element Hessians ``(n_e, m, m)`` for ``hessian="exact"`` solves.
    """

    n_vars: int
    objective: Callable[[np.ndarray], float]
    eq_constraints: Callable | None = None
    ineq_constraints: Callable | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    x0: np.ndarray | None = None
    gradient: Callable | None = None
    eq_jacobian: Callable | None = None
    ineq_jacobian: Callable | None = None
    hessian: Callable | None = None
    partition: list | None = None
    element_gradients: Callable | None = None
    element_hessians: Callable | None = None
    derivatives: str = "ad"
    _m: tuple = field(default=None, repr=False)

    def __post_init__(self):
        n = self.n_vars
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must have length n_vars")
        if np.any(self.lower > self.upper):
            raise ValueError("variable bound lower > upper")
        if self.x0 is None:
            self.x0 = np.clip(np.zeros(n), self.lower, self.upper)
        self.x0 = np.asarray(self.x0, dtype=float)

    # -- evaluation ---------------------------------------------------------
    def f(self, x) -> float:
        return float(self.objective(x))

    def c_eq(self, x) -> np.ndarray:
        if self.eq_constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.eq_constraints(x), dtype=float))

    def c_in(self, x) -> np.ndarray:
        if self.ineq_constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.ineq_constraints(x), dtype=float))

    @property
    def m_eq(self) -> int:
        return self._sizes()[0]

    @property
    def m_in(self) -> int:
        return self._sizes()[1]

    def _sizes(self):
        if self._m is None:
            self._m = (self.c_eq(self.x0).size, self.c_in(self.x0).size)
        return self._m

    def grad(self, x) -> np.ndarray:
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        return self._auto_jac(self.objective, x).reshape(-1)

    def jac_eq(self, x):
        if self.eq_jacobian is not None:
            return self.eq_jacobian(x)
        if self.eq_constraints is None:
            return np.zeros((0, self.n_vars))
        return self._auto_jac(self.eq_constraints, x)

    def jac_in(self, x):
        if self.ineq_jacobian is not None:
            return self.ineq_jacobian(x)
        if self.ineq_constraints is None:
            return np.zeros((0, self.n_vars))
        return self._auto_jac(self.ineq_constraints, x)

    def lagrangian_hessian(self, x, lam_eq=None, lam_in=None) -> np.ndarray:
        """Hessian of ``f + lam_eq' c_eq + lam_in' c_in``.

        Uses the ``hessian`` callback when given, otherwise central
        differences of the Lagrangian gradient.
        """
        if self.hessian is not None:
            return _dense(self.hessian(x, lam_eq, lam_in))
        lam_eq = np.zeros(self.m_eq) if lam_eq is None else np.asarray(lam_eq, dtype=float)
        lam_in = np.zeros(self.m_in) if lam_in is None else np.asarray(lam_in, dtype=float)

        def grad_l(z):
            g = self.grad(z)
            if lam_eq.size:
                g = g + _dense(self.jac_eq(z)).T @ lam_eq
            if lam_in.size:
                g = g + _dense(self.jac_in(z)).T @ lam_in
            return g

        H = finite_difference_jacobian(grad_l, x, rel_step=1e-5)
        return 0.5 * (H + H.T)

    def _auto_jac(self, fn, x):
        x = np.asarray(x, dtype=float)
        if self.derivatives == "ad":
            try:
                (xd,) = autodiff.seed(x)
                out = fn(xd)
                if isinstance(out, autodiff.Dual):
                    return np.atleast_2d(out.der.reshape(-1, x.size))
                return np.zeros((np.size(out), x.size))
            except autodiff.UnsupportedOperation as exc:
                logger.warning("AD unsupported (%s); using finite differences", exc)
                self.derivatives = "fd"
        return finite_difference_jacobian(fn, x)


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def zeros(cls, problem: NlpProblem) -> "Multipliers":
        n = problem.n_vars
        return cls(np.zeros(problem.m_eq), np.zeros(problem.m_in), np.zeros(n), np.zeros(n))


@dataclass
class KktReport:
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float
    flagged: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def residual(self) -> float:
        return max(
            self.stationarity, self.primal_feasibility, self.dual_feasibility, self.complementarity
        )

    @property
    def ok(self) -> bool:
        return self.residual <= self.tol


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    multipliers: Multipliers
    status: str
    kkt_residual: float
    iterations: int = 0
    report: KktReport | None = None
    message: str = ""

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(problem, x, mult, g, ce, Je, ci, Ji, tol=1e-6) -> KktReport:
    """KKT residuals from precomputed derivatives (see :func:`check_kkt`)."""
    stat = g - mult.lower + mult.upper
    if ce.size:
        stat = stat + (Je.T @ mult.eq)
    if ci.size:
        stat = stat + (Ji.T @ mult.ineq)
    lo_fin = np.isfinite(problem.lower)
    up_fin = np.isfinite(problem.upper)
    primal = 0.0
    if ce.size:
        primal = max(primal, float(np.max(np.abs(ce))))
    if ci.size:
        primal = max(primal, float(np.max(ci, initial=0.0)))
    primal = max(
        primal,
        float(np.max(problem.lower - x, initial=0.0)),
        float(np.max(x - problem.upper, initial=0.0)),
    )
    dual = max(
        float(np.max(-mult.ineq, initial=0.0)),
        float(np.max(-mult.lower, initial=0.0)),
        float(np.max(-mult.upper, initial=0.0)),
    )
    comp_in = np.abs(mult.ineq * ci) if ci.size else np.zeros(0)
    comp_lo = np.where(lo_fin, np.abs(mult.lower * np.where(lo_fin, x - problem.lower, 0.0)), 0.0)
    comp_lo = np.maximum(comp_lo, np.where(lo_fin, 0.0, np.abs(mult.lower)))
    comp_up = np.where(up_fin, np.abs(mult.upper * np.where(up_fin, problem.upper - x, 0.0)), 0.0)
    comp_up = np.maximum(comp_up, np.where(up_fin, 0.0, np.abs(mult.upper)))
    flagged = (
        [("ineq", int(i)) for i in np.flatnonzero(comp_in > tol)]
        + [("lower", int(i)) for i in np.flatnonzero(comp_lo > tol)]
        + [("upper", int(i)) for i in np.flatnonzero(comp_up > tol)]
    )
    comp = max(
        float(np.max(comp_in, initial=0.0)),
        float(np.max(comp_lo, initial=0.0)),
        float(np.max(comp_up, initial=0.0)),
    )
    return KktReport(
        stationarity=float(np.max(np.abs(stat), initial=0.0)),
        primal_feasibility=primal,
        dual_feasibility=dual,
        complementarity=comp,
        flagged=flagged,
        tol=tol,
    )


def check_kkt(problem: NlpProblem, point, multipliers: Multipliers | None = None, tol=1e-6) -> KktReport:
    """Evaluate first-order optimality of a candidate point.

    Independent of the solver: derivatives come straight from the problem,
    so external candidate points can be certified too. Missing multipliers
    are taken as zero.
    """
    x = np.asarray(point, dtype=float)
    if multipliers is None:
        multipliers = Multipliers.zeros(problem)
    return kkt_residuals(
        problem,
        x,
        multipliers,
        problem.grad(x),
        problem.c_eq(x),
        _dense(problem.jac_eq(x)),
        problem.c_in(x),
        _dense(problem.jac_in(x)),
        tol,
    )
