"""SQP with damped BFGS Hessians and an l1-penalty line search.

The Hessian of the Lagrangian is approximated element-wise when the problem
supplies a partition (a partitioned quasi-Newton scheme); otherwise a single
dense damped BFGS matrix is used. Powell damping keeps every element
positive definite so each QP subproblem is strictly convex. When a QP
subproblem is infeasible, the inequalities are relaxed elastically with a
large penalty; a point that stays infeasible under the relaxation is
reported as ``infeasible``, never as optimal.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from tems.nlp.problem import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    Multipliers,
    NlpProblem,
    NlpSolution,
    kkt_residuals,
)
from tems.nlp.qp import solve_qp

logger = logging.getLogger(__name__)


class _Evaluation:
    __slots__ = ("x", "f", "g", "ce", "Je", "ci", "Ji")

    def __init__(self, problem: NlpProblem, x):
        self.x = x
        self.f = problem.f(x)
        self.g = problem.grad(x)
        self.ce = problem.c_eq(x)
        self.Je = problem.jac_eq(x)
        self.ci = problem.c_in(x)
        self.Ji = problem.jac_in(x)

    def violation(self) -> float:
        return float(np.abs(self.ce).sum() + np.maximum(self.ci, 0.0).sum())

    def lagrangian_grad(self, lam_eq, lam_in):
        out = self.g.copy()
        if self.ce.size:
            out += self.Je.T @ lam_eq
        if self.ci.size:
            out += self.Ji.T @ lam_in
        return out


def damped_bfgs_update(B, s, y):
    """Powell-damped BFGS update, vectorized over a leading element axis.

    ``B`` has shape ``(n_e, m, m)``, ``s`` and ``y`` shape ``(n_e, m)``.
    Elements with a negligible step are left unchanged.
    """
    Bs = np.einsum("eij,ej->ei", B, s)
    sBs = np.einsum("ei,ei->e", s, Bs)
    sy = np.einsum("ei,ei->e", s, y)
    active = sBs > 1e-16 * np.maximum(1.0, np.einsum("ei,ei->e", s, s))
    theta = np.where(sy >= 0.2 * sBs, 1.0, 0.8 * sBs / np.where(sBs - sy != 0, sBs - sy, 1.0))
    r = theta[:, None] * y + (1.0 - theta[:, None]) * Bs
    sr = np.einsum("ei,ei->e", s, r)
    ok = active & (sr > 0)
    safe_sBs = np.where(ok, sBs, 1.0)
    safe_sr = np.where(ok, sr, 1.0)
    upd = -np.einsum("ei,ej->eij", Bs, Bs) / safe_sBs[:, None, None] + np.einsum(
        "ei,ej->eij", r, r
    ) / safe_sr[:, None, None]
    return B + np.where(ok[:, None, None], upd, 0.0)


class SqpSolver:
    """Stateful SQP solver.

    The per-element quasi-Newton matrices survive between calls to
    :meth:`solve` while the problem structure is unchanged, which is what a
    receding-horizon controller wants when it re-solves a shifted problem.

    Args:
        tol: KKT residual required for ``optimal``.
        max_iter: Iteration cap.
        hessian: ``"bfgs"`` or ``"exact"`` (element Hessians projected onto
            the PSD cone when the problem provides them, otherwise
            ``problem.hessian`` shifted until positive definite).
        elastic_penalty: Weight of the l1 slack in relaxed QP subproblems.
        keep_hessian: Reuse quasi-Newton memory across solves.
    """

    def __init__(
        self,
        tol: float = 1e-6,
        max_iter: int = 100,
        hessian: str = "bfgs",
        elastic_penalty: float = 1e6,
        keep_hessian: bool = True,
        qp_tol: float = 1e-10,
    ):
        if hessian not in ("bfgs", "exact"):
            raise ValueError(f"unknown hessian mode {hessian!r}")
        self.tol = tol
        self.max_iter = max_iter
        self.hessian = hessian
        self.elastic_penalty = elastic_penalty
        self.keep_hessian = keep_hessian
        self.qp_tol = qp_tol
        self._memory = None

    def reset(self):
        self._memory = None

    # -- Hessian bookkeeping ------------------------------------------------
    def _partition(self, problem):
        if problem.partition is not None:
            return [np.asarray(p, dtype=int) for p in problem.partition]
        return [np.arange(problem.n_vars)[None, :]]

    def _init_memory(self, parts):
        shapes = [p.shape for p in parts]
        mem = self._memory
        if self.keep_hessian and mem is not None and mem["shapes"] == shapes:
            return mem
        self._memory = {
            "shapes": shapes,
            "B": [np.broadcast_to(np.eye(p.shape[1]), (p.shape[0],) + (p.shape[1],) * 2).copy() for p in parts],
            "scaled": [np.zeros(p.shape[0], bool) for p in parts],
        }
        return self._memory

    def _assemble(self, parts, Bs, n):
        if len(parts) == 1 and parts[0].shape == (1, n):
            return Bs[0][0]
        rows, cols, vals = [], [], []
        for idx, B in zip(parts, Bs):
            m = idx.shape[1]
            rows.append(np.repeat(idx, m, axis=1).ravel())
            cols.append(np.tile(idx, (1, m)).ravel())
            vals.append(B.ravel())
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        return H

    def _element_grads(self, problem, parts, ev, lam_eq, lam_in):
        if problem.element_gradients is not None:
            return problem.element_gradients(ev.x, lam_eq, lam_in)
        return [ev.lagrangian_grad(lam_eq, lam_in)[parts[0]]]

    # -- main loop ----------------------------------------------------------
    def solve(self, problem: NlpProblem, x0=None, multipliers: Multipliers | None = None) -> NlpSolution:
        n = problem.n_vars
        lo, hi = problem.lower, problem.upper
        x = np.clip(np.asarray(problem.x0 if x0 is None else x0, dtype=float), lo, hi)
        ev = _Evaluation(problem, x)
        mult = multipliers if multipliers is not None else Multipliers.zeros(problem)
        parts = self._partition(problem)
        mem = self._init_memory(parts) if self.hessian == "bfgs" else None
        rho = 1.0
        best = None
        status, message = MAX_ITER, "iteration limit reached"
        ls_failures = 0
        it = 0
        for it in range(self.max_iter + 1):
            report = kkt_residuals(problem, x, mult, ev.g, ev.ce, ev.Je, ev.ci, ev.Ji, self.tol)
            key = (report.primal_feasibility > self.tol, report.residual)
            if best is None or key < best[0]:
                best = (key, x.copy(), ev.f, mult, report)
            if report.residual <= self.tol:
                status, message = OPTIMAL, "KKT conditions satisfied"
                best = (key, x.copy(), ev.f, mult, report)
                break
            if it == self.max_iter:
                break

            if self.hessian == "exact" and problem.element_hessians is not None:
                Hs = problem.element_hessians(x, mult.eq, mult.ineq)
                H = self._assemble(parts, [_project_psd(B) for B in Hs], n)
            elif self.hessian == "exact":
                H = _convexify(problem.lagrangian_hessian(x, mult.eq, mult.ineq))
            else:
                H = self._assemble(parts, mem["B"], n)

            qp = solve_qp(
                H, ev.g, ev.Je, -ev.ce, ev.Ji, -ev.ci, lo - x, hi - x, tol=min(self.qp_tol, 1e-2 * self.tol)
            )
            elastic = qp.status != OPTIMAL
            lin_viol = 0.0
            if elastic:
                qp, lin_viol = self._elastic_qp(H, ev, lo - x, hi - x)
                if qp.status != OPTIMAL:
                    status, message = INFEASIBLE, "relaxed QP subproblem failed"
                    break
            d = qp.d
            rho = max(rho, 1.5 * float(np.max(np.abs(np.concatenate([qp.lam_eq, qp.lam_in])), initial=0.0)))
            if elastic:
                rho = max(rho, self.elastic_penalty)
            viol = ev.violation()
            if viol > 0.0 and not elastic:
                # penalty large enough for the QP model to decrease the merit
                model_dec = float(ev.g @ d + 0.5 * d @ (H @ d))
                rho = max(rho, 2.0 * model_dec / viol)
            deriv = float(ev.g @ d) - rho * (viol - lin_viol)
            if elastic and lin_viol > self.tol and np.max(np.abs(d), initial=0.0) < self.tol:
                status, message = INFEASIBLE, f"stationary for the l1 relaxation, violation {lin_viol:.3g}"
                break

            phi0 = ev.f + rho * viol
            alpha, accepted, trial = 1.0, False, None
            while alpha > 1e-10:
                xt = np.clip(x + alpha * d, lo, hi)
                trial = _Evaluation(problem, xt)
                phit = trial.f + rho * trial.violation()
                if np.isfinite(phit) and phit <= phi0 + 1e-4 * alpha * min(deriv, 0.0) + 1e-14 * abs(phi0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                ls_failures += 1
                if mem is not None:
                    self._memory = None
                    mem = self._init_memory(parts)
                if ls_failures >= 3:
                    message = "line search failed"
                    break
                continue
            ls_failures = 0
            logger.debug(
                "it %d: alpha %.3g rho %.3g f %.10g viol %.3g -> %.3g",
                it, alpha, rho, ev.f, viol, trial.violation(),
            )

            new_mult = Multipliers(qp.lam_eq, qp.lam_in, qp.lam_lo, qp.lam_hi)
            if mem is not None:
                g_new = self._element_grads(problem, parts, trial, new_mult.eq, new_mult.ineq)
                g_old = self._element_grads(problem, parts, ev, new_mult.eq, new_mult.ineq)
                step = trial.x - x
                for e, idx in enumerate(parts):
                    s_e = step[idx]
                    y_e = g_new[e] - g_old[e]
                    B = mem["B"][e]
                    fresh = ~mem["scaled"][e]
                    if np.any(fresh):
                        sy = np.einsum("ei,ei->e", s_e, y_e)
                        yy = np.einsum("ei,ei->e", y_e, y_e)
                        moved = np.einsum("ei,ei->e", s_e, s_e) > 1e-20
                        use = fresh & moved & (sy > 1e-12)
                        gamma = np.where(use, yy / np.where(use, sy, 1.0), 1.0)
                        B[use] = gamma[use, None, None] * np.eye(idx.shape[1])
                        mem["scaled"][e] |= use
                    mem["B"][e] = damped_bfgs_update(B, s_e, y_e)
            x, ev, mult = trial.x, trial, new_mult

        _, xb, fb, mb, rb = best
        if status == OPTIMAL:
            xb, fb, mb, rb = x, ev.f, mult, report
        elif status == INFEASIBLE:
            rb = kkt_residuals(problem, x, mult, ev.g, ev.ce, ev.Je, ev.ci, ev.Ji, self.tol)
            xb, fb, mb = x, ev.f, mult
        return NlpSolution(
            x=xb,
            objective=float(fb),
            multipliers=mb,
            status=status,
            kkt_residual=rb.residual,
            iterations=it,
            report=rb,
            message=message,
        )

    def _elastic_qp(self, H, ev, lo, hi):
        m_i = ev.ci.size
        n = ev.g.size
        if m_i == 0:
            qp = solve_qp(H, ev.g, ev.Je, -ev.ce, None, None, lo, hi, tol=min(self.qp_tol, 1e-2 * self.tol))
            return qp, 0.0
        Hs = sp.block_diag([sp.csr_matrix(H), sp.csr_matrix((m_i, m_i))]).tocsr()
        Hs = Hs + sp.diags(np.r_[np.zeros(n), np.full(m_i, 1e-8)])
        gs = np.r_[ev.g, np.full(m_i, self.elastic_penalty)]
        Je = sp.hstack([sp.csr_matrix(ev.Je), sp.csr_matrix((ev.ce.size, m_i))]).tocsr()
        Ji = sp.hstack([sp.csr_matrix(ev.Ji), -sp.eye(m_i)]).tocsr()
        qp = solve_qp(
            Hs,
            gs,
            Je,
            -ev.ce,
            Ji,
            -ev.ci,
            np.r_[lo, np.zeros(m_i)],
            np.r_[hi, np.full(m_i, np.inf)],
            tol=min(self.qp_tol, 1e-2 * self.tol),
        )
        slack = qp.d[n:]
        qp.d = qp.d[:n]
        qp.lam_lo = qp.lam_lo[:n]
        qp.lam_hi = qp.lam_hi[:n]
        return qp, float(np.maximum(slack, 0.0).sum())


def _project_psd(B, floor: float = 1e-8):
    """Clip the eigenvalues of each element matrix from below."""
    w, V = np.linalg.eigh(0.5 * (B + np.swapaxes(B, -1, -2)))
    w = np.maximum(w, floor * np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True)))
    return np.einsum("eij,ej,ekj->eik", V, w, V)


def _convexify(H):
    H = H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    tau = 0.0
    for _ in range(30):
        try:
            np.linalg.cholesky(H + tau * np.eye(H.shape[0]))
            return H + tau * np.eye(H.shape[0])
        except np.linalg.LinAlgError:
            tau = max(2 * tau, 1e-8 * max(1.0, np.abs(H).max()))
    return H + tau * np.eye(H.shape[0])


def solve(problem: NlpProblem, tol: float = 1e-6, max_iter: int = 100, **kwargs) -> NlpSolution:
    """One-shot SQP solve (fresh quasi-Newton memory)."""
    return SqpSolver(tol=tol, max_iter=max_iter, **kwargs).solve(problem)
