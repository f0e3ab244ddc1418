"""Estimation of the primary-system uncertainty from consecutive measurements.

Given ``x(t)``, the applied ``u(t)`` and the measured ``x(t+1)``, the
estimate minimizes::

    ||x(t+1) - f(x(t), u(t), d)||^2 + (prev - d)' W (prev - d)

either over a finite candidate list or over the continuous box whose
significant dimensions range over their bounds and whose remaining
dimensions are pinned to nominal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from tems.model import ModelError, ModelSpec, UncertaintyDecl, step
from tems.nlp.autodiff import jacobian
from tems.nlp.problem import NlpProblem
from tems.nlp.sqp import SqpSolver
from tems.scenario_tree import RealizationSet, sample_box_vertices

logger = logging.getLogger(__name__)

FINITE = "finite"
BOX = "box"


@dataclass(frozen=True)
class EstimateResult:
    """Outcome of one estimation.

    Attributes:
        d_bar: Chosen uncertainty vector.
        residual: Squared fit error ``||x_next - f(x_t, u_t, d_bar)||^2``.
        penalized_objective: ``residual`` plus the regularization term.
        source: ``"finite"`` or ``"box"``.
        index: Candidate position for finite estimates, else ``None``.
        fallback: The box solve failed and the finite vertex search was used.
    """

    d_bar: np.ndarray
    residual: float
    penalized_objective: float
    source: str
    index: int | None = None
    fallback: bool = False


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator selection.

    Args:
        kind: ``"finite"`` (search the candidate list) or ``"box"``.
        w_diag: Diagonal of ``W`` per uncertainty dimension; ``None`` means zero.
        tol: KKT tolerance of the box solve.
    """

    kind: str = BOX
    w_diag: tuple[float, ...] | None = None
    tol: float = 1e-9

    def __post_init__(self):
        if self.kind not in (FINITE, BOX):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.w_diag is not None and any(w < 0 for w in self.w_diag):
            raise ValueError("W must be positive semi-definite")

    def weight_matrix(self, n_d: int) -> np.ndarray:
        if self.w_diag is None:
            return np.zeros((n_d, n_d))
        if len(self.w_diag) != n_d:
            raise ValueError(f"w_diag has {len(self.w_diag)} entries, expected {n_d}")
        return np.diag(np.asarray(self.w_diag, dtype=float))


def _weight(W, n_d):
    if W is None:
        return np.zeros((n_d, n_d))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape == (1, 1) and n_d != 1:
        W = W[0, 0] * np.eye(n_d)
    if W.shape != (n_d, n_d):
        raise ValueError(f"W has shape {W.shape}, expected ({n_d}, {n_d})")
    return W


def _objective_terms(model, x_t, u_t, x_next, D, prev, W):
    """Residuals and penalized objectives for the rows of ``D``."""
    D = np.atleast_2d(D)
    X = np.broadcast_to(x_t, (D.shape[0], model.n_x))
    U = np.broadcast_to(u_t, (D.shape[0], model.n_u))
    pred = model.dynamics(X, U, D)
    res = np.sum((x_next - pred) ** 2, axis=-1)
    if prev is None:
        return res, res.copy()
    e = prev - D
    return res, res + np.einsum("ci,ij,cj->c", e, W, e)


def estimate_finite(
    model: ModelSpec,
    x_t,
    u_t,
    x_next,
    candidates: RealizationSet,
    prev=None,
    W=None,
    tie_tol: float = 1e-12,
) -> EstimateResult:
    """Best candidate under the penalized squared-norm objective.

    Objectives within ``tie_tol`` (relative) of the minimum count as ties;
    ties go to ``prev`` if it is among them, then to the lowest index.
    Candidates with a non-finite prediction are skipped.

    Raises:
        ModelError: No candidate gives a finite prediction.
    """
    x_t, u_t, x_next = (np.asarray(a, dtype=float) for a in (x_t, u_t, x_next))
    D = candidates.vectors
    W = _weight(W, model.n_d)
    prev = None if prev is None else np.asarray(prev, dtype=float)
    res, obj = _objective_terms(model, x_t, u_t, x_next, D, prev, W)
    obj = np.where(np.isfinite(obj), obj, np.inf)
    if not np.any(np.isfinite(obj)):
        raise ModelError("no candidate gives a finite prediction")
    best = float(np.min(obj))
    tied = np.flatnonzero(obj <= best + tie_tol * max(1.0, abs(best)))
    pick = int(tied[0])
    if prev is not None:
        same = [i for i in tied if np.array_equal(D[i], prev)]
        if same:
            pick = int(same[0])
    return EstimateResult(
        d_bar=D[pick].copy(),
        residual=float(res[pick]),
        penalized_objective=float(obj[pick]),
        source=FINITE,
        index=pick,
    )


@dataclass
class _FitResidual:
    model: ModelSpec
    x_t: np.ndarray
    u_t: np.ndarray
    x_next: np.ndarray
    base: np.ndarray
    dims: np.ndarray
    _last: tuple | None = None

    def full(self, p):
        p = np.asarray(p, dtype=float)
        d = self.base.copy()
        d[self.dims] = p
        return d

    def residual_and_jac(self, p):
        key = np.asarray(p, dtype=float).tobytes()
        if self._last is None or self._last[0] != key:
            pred, J = jacobian(lambda dd: self.model.dynamics(self.x_t, self.u_t, dd), self.full(p))
            self._last = (key, self.x_next - pred, -J[:, self.dims])
        return self._last[1], self._last[2]


def estimate_box(
    model: ModelSpec,
    x_t,
    u_t,
    x_next,
    box: UncertaintyDecl,
    prev=None,
    W=None,
    tol: float = 1e-9,
) -> EstimateResult:
    """Estimate over the continuous box of the significant dimensions.

    Solved with the SQP under bound constraints using the Gauss-Newton
    Hessian, started from ``prev`` (or the box center without ``prev``). A
    failed run is retried from the center; if that fails too the finite
    search over the box vertices plus nominal is used and the result is
    flagged.
    """
    x_t, u_t, x_next = (np.asarray(a, dtype=float) for a in (x_t, u_t, x_next))
    dims = np.flatnonzero(box.significant)
    W = _weight(W, model.n_d)
    prev_v = None if prev is None else np.asarray(prev, dtype=float)
    if prev_v is not None and not box.contains(prev_v, atol=1e-9):
        raise ValueError("previous estimate lies outside the estimation box")
    if dims.size == 0:
        res, obj = _objective_terms(model, x_t, u_t, x_next, box.nominal, prev_v, W)
        return EstimateResult(box.nominal.copy(), float(res[0]), float(obj[0]), BOX)
    fit = _FitResidual(model, x_t, u_t, x_next, box.nominal.copy(), dims)
    lo, hi = box.lower[dims], box.upper[dims]
    Wd = W[np.ix_(dims, dims)]
    prev_full = prev_v
    # scaling leaves the minimizer unchanged and keeps the KKT tolerance meaningful
    scale = 1.0 / (1.0 + float(np.max(np.abs(W), initial=0.0)))

    def objective(p):
        r, _ = fit.residual_and_jac(p)
        val = float(r @ r)
        if prev_full is not None:
            e = prev_full - fit.full(p)
            val += float(e @ W @ e)
        return scale * val

    def gradient(p):
        r, J = fit.residual_and_jac(p)
        g = 2.0 * J.T @ r
        if prev_full is not None:
            e = prev_full - fit.full(p)
            g -= 2.0 * (W @ e)[dims]
        return scale * g

    def hessian(p, lam_eq=None, lam_in=None):
        _, J = fit.residual_and_jac(p)
        H = 2.0 * J.T @ J
        if prev_full is not None:
            H = H + 2.0 * Wd
        return scale * H

    problem = NlpProblem(
        n_vars=dims.size,
        objective=objective,
        lower=lo,
        upper=hi,
        gradient=gradient,
        hessian=hessian,
    )
    starts = [0.5 * (lo + hi)]
    if prev_v is not None:
        starts.insert(0, np.clip(prev_v[dims], lo, hi))
    best = None
    for x0 in starts:
        sol = SqpSolver(tol=tol, hessian="exact", max_iter=50).solve(problem, x0=x0)
        if sol.success:
            best = sol
            break
    if best is None:
        logger.warning("box estimation failed; using the finite vertex search")
        fin = estimate_finite(
            model, x_t, u_t, x_next, sample_box_vertices(box, True, dims), prev_v, W
        )
        return EstimateResult(
            fin.d_bar, fin.residual, fin.penalized_objective, BOX, fin.index, fallback=True
        )
    d_bar = fit.full(np.clip(best.x, lo, hi))
    res, obj = _objective_terms(model, x_t, u_t, x_next, d_bar, prev_v, W)
    return EstimateResult(d_bar, float(res[0]), float(obj[0]), BOX)


def estimation_box(decl: UncertaintyDecl) -> UncertaintyDecl:
    """Box with non-significant dimensions pinned to nominal."""
    sig = np.asarray(decl.significant, dtype=bool)
    return UncertaintyDecl(
        nominal=decl.nominal,
        lower=np.where(sig, decl.lower, decl.nominal),
        upper=np.where(sig, decl.upper, decl.nominal),
        significant=decl.significant,
        additive=decl.additive,
        names=decl.names,
    )


def propagate_primary(model: ModelSpec, z_t, v_t, d_bar) -> np.ndarray:
    """Primary-system step ``z+ = f(z, v, d_bar)``."""
    z = step(model, z_t, v_t, d_bar)
    if not np.all(np.isfinite(z)):
        raise ModelError("primary state propagation produced a non-finite value")
    return z
