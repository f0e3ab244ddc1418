"""Primal-dual interior-point solver for convex QP subproblems.

Solves::

    min 0.5 d'Hd + g'd  s.t.  A d = b,  C d <= h,  lo <= d <= hi

with Mehrotra predictor-corrector steps. Bounds are handled as diagonal
barrier terms; the reduced KKT system is factorized densely for small
problems and with SuperLU otherwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_LIMIT = 200


@dataclass
class QpResult:
    d: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    status: str
    iterations: int


def _factor(K):
    if sp.issparse(K):
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        return lu.solve
    lu = la.lu_factor(K, check_finite=False)
    return lambda r: la.lu_solve(lu, r, check_finite=False)


class _SparseKkt:
    """Fixed-pattern assembly of ``[[H + D + C' W C, A'], [A, -eps I]]``.

    The pattern is computed once; each interior-point iteration only
    scatters new values into the CSC data array.
    """

    def __init__(self, H, A, C, n, eps=1e-12):
        H, A, C = H.tocoo(), A.tocoo(), C.tocsr()
        m_e = A.shape[0]
        self.size = n + m_e
        # C' W C as sum over rows r of w_r * c_r c_r'
        pr, pc, prow, pcoef = [], [], [], []
        for r in range(C.shape[0]):
            lo, hi = C.indptr[r], C.indptr[r + 1]
            idx, val = C.indices[lo:hi], C.data[lo:hi]
            pr.append(np.repeat(idx, idx.size))
            pc.append(np.tile(idx, idx.size))
            prow.append(np.full(idx.size**2, r))
            pcoef.append(np.outer(val, val).ravel())
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
        self.c_row = cat(prow).astype(int)
        self.c_coef = cat(pcoef)
        diag = np.arange(n)
        reg = n + np.arange(m_e)
        rows = np.concatenate([H.row, diag, cat(pr).astype(int), n + A.row, A.col, reg])
        cols = np.concatenate([H.col, diag, cat(pc).astype(int), A.col, n + A.row, reg])
        self.h_vals = H.data
        self.a_vals = A.data
        self.reg_vals = np.full(m_e, -eps)
        key = cols.astype(np.int64) * self.size + rows
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % self.size).astype(np.int32)
        counts = np.bincount(uniq // self.size, minlength=self.size)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.nnz = uniq.size

    def matrix(self, diag, wz):
        vals = np.concatenate(
            [self.h_vals, diag, self.c_coef * wz[self.c_row], self.a_vals, self.a_vals, self.reg_vals]
        )
        data = np.bincount(self.slot, weights=vals, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


def _step_to_boundary(v, dv, frac=1.0):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, frac * float(np.min(v[neg] / -dv[neg])))


def solve_qp(H, g, A=None, b=None, C=None, h=None, lo=None, hi=None, tol=1e-10, max_iter=80):
    """Solve a convex QP; ``status`` is ``optimal``, ``infeasible`` or ``max_iter``.

    General inequalities and finite bounds share one slack vector ``t`` and
    one multiplier vector ``y`` so that ``G d + t = r`` with
    ``G = [C; -I_lo; I_hi]``.
    """
    n = g.size
    use_sparse = sp.issparse(H) or sp.issparse(A) or sp.issparse(C)
    A = sp.csr_matrix((0, n)) if A is None else A
    C = sp.csr_matrix((0, n)) if C is None else C
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, float)
    h = np.zeros(C.shape[0]) if h is None else np.asarray(h, float)
    lo = np.full(n, -np.inf) if lo is None else np.asarray(lo, float)
    hi = np.full(n, np.inf) if hi is None else np.asarray(hi, float)
    m_e, m_i = A.shape[0], C.shape[0]
    if use_sparse and n + m_e <= DENSE_LIMIT:
        use_sparse = False
    if use_sparse:
        H, A, C = sp.csr_matrix(H), sp.csr_matrix(A), sp.csr_matrix(C)
        AT, CT = A.T.tocsr(), C.T.tocsr()
    else:
        H = H.toarray() if sp.issparse(H) else np.asarray(H, float)
        A = A.toarray() if sp.issparse(A) else np.asarray(A, float).reshape(m_e, n)
        C = C.toarray() if sp.issparse(C) else np.asarray(C, float).reshape(m_i, n)
        AT, CT = A.T, C.T

    il = np.flatnonzero(np.isfinite(lo))
    iu = np.flatnonzero(np.isfinite(hi))
    fixed = np.intersect1d(il, iu)
    if np.any(hi[fixed] - lo[fixed] < 0):
        return _fail(n, m_e, m_i, "infeasible")
    nl = il.size
    sl_c, sl_l, sl_u = slice(0, m_i), slice(m_i, m_i + nl), slice(m_i + nl, None)
    r = np.concatenate([h, -lo[il], hi[iu]])

    def G(v):
        return np.concatenate([C @ v, -v[il], v[iu]])

    def GT(w):
        out = CT @ w[sl_c] if m_i else np.zeros(n)
        out[il] -= w[sl_l]
        out[iu] += w[sl_u]
        return out

    # start strictly inside the bounds
    width = np.where(np.isfinite(hi - lo), hi - lo, np.inf)
    pad = np.minimum(1.0, 0.5 * width)
    d = np.zeros(n)
    d = np.where(np.isfinite(lo), np.maximum(d, lo + 0.5 * pad), d)
    d = np.where(np.isfinite(hi), np.minimum(d, hi - 0.5 * pad), d)
    lam = np.zeros(m_e)
    t = np.concatenate(
        [
            np.maximum(h - C @ d, 1.0) if m_i else np.zeros(0),
            np.maximum(d[il] - lo[il], 1e-2 * np.maximum(1.0, pad[il])),
            np.maximum(hi[iu] - d[iu], 1e-2 * np.maximum(1.0, pad[iu])),
        ]
    )
    y = np.ones(t.size)
    n_comp = t.size
    scale = 1.0 + max(np.max(np.abs(g), initial=0.0), np.max(np.abs(b), initial=0.0))
    kkt = _SparseKkt(H, A, C, n) if use_sparse else None
    Hd = H @ d
    Ad = A @ d if m_e else np.zeros(0)
    Gd = G(d)

    for it in range(1, max_iter + 1):
        rd = Hd + g + GT(y)
        if m_e:
            rd += AT @ lam
        re = Ad - b
        rc = Gd + t - r
        mu = (t @ y) / n_comp if n_comp else 0.0
        res = max(
            np.max(np.abs(rd), initial=0.0),
            np.max(np.abs(re), initial=0.0),
            np.max(np.abs(rc), initial=0.0),
        )
        if res <= tol * scale and mu <= tol:
            polished = _polish(
                H, g, A, b, C, h, lo, hi, il, iu, y > t, sl_c, sl_l, sl_u, tol * scale, use_sparse
            )
            if polished is not None:
                return QpResult(*polished, "optimal", it)
            return QpResult(
                d, lam, y[sl_c].copy(), _scatter(n, il, y[sl_l]), _scatter(n, iu, y[sl_u]), "optimal", it
            )
        if (n_comp and y.max() > 1e14) or not np.isfinite(res):
            return _fail(n, m_e, m_i, "infeasible", it)

        wt = y / t
        diag = np.zeros(n)
        diag[il] += wt[sl_l]
        diag[iu] += wt[sl_u]
        wz = wt[sl_c]
        if use_sparse:
            K = kkt.matrix(diag, wz)
        else:
            K11 = H + np.diag(diag)
            if m_i:
                K11 = K11 + (CT * wz) @ C
            K = np.block([[K11, AT], [A, -1e-12 * np.eye(m_e)]]) if m_e else K11
        try:
            solve = _factor(K)
        except (RuntimeError, la.LinAlgError, ValueError):
            return _fail(n, m_e, m_i, "infeasible", it)

        def direction(rty):
            rhs = -rd - GT((y * rc - rty) / t)
            sol = solve(np.concatenate([rhs, -re]))
            dd = sol[:n]
            dt = -rc - G(dd)
            dy = (-rty - y * dt) / t
            return dd, sol[n:], dt, dy

        def max_step(dt, dy):
            return min(_step_to_boundary(t, dt), _step_to_boundary(y, dy))

        # predictor
        ty = t * y
        dd, dlam, dt, dy = direction(ty)
        if n_comp:
            alpha = max_step(dt, dy)
            mu_aff = ((t + alpha * dt) @ (y + alpha * dy)) / n_comp
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dd, dlam, dt, dy = direction(ty + dt * dy - sigma * mu)
            alpha = min(1.0, 0.995 * max_step(dt, dy))
        else:
            alpha = 1.0
        d = d + alpha * dd
        lam = lam + alpha * dlam
        t = t + alpha * dt
        y = y + alpha * dy
        Hd = H @ d
        Ad = A @ d if m_e else Ad
        Gd = G(d)

    return QpResult(
        d, lam, y[sl_c].copy(), _scatter(n, il, y[sl_l]), _scatter(n, iu, y[sl_u]), "max_iter", max_iter
    )


def _polish(H, g, A, b, C, h, lo, hi, il, iu, strong, sl_c, sl_l, sl_u, ftol, use_sparse):
    """Active-set refinement of an interior-point solution.

    Constraints whose multiplier exceeds their slack are treated as active
    and the equality-constrained QP on that set is solved directly, which
    removes the ``O(mu)`` offset of the barrier iterate. Returns ``None``
    (keep the interior-point point) when the system is singular or the
    result is not primal and dual feasible.
    """
    n, m_e, m_i = g.size, A.shape[0], C.shape[0]
    act_c = np.flatnonzero(strong[sl_c])
    on_lo = il[strong[sl_l]]
    on_hi = iu[strong[sl_u]]
    d = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    d[on_lo] = lo[on_lo]
    d[on_hi] = hi[on_hi]
    fixed[on_lo] = True
    fixed[on_hi] = True
    free = np.flatnonzero(~fixed)
    Ca = C[act_c]
    n_f, k = free.size, act_c.size
    rhs = np.concatenate([
        -(g[free] + (H[free][:, fixed] @ d[fixed] if fixed.any() else 0.0)),
        b - (A[:, fixed] @ d[fixed] if fixed.any() else 0.0),
        h[act_c] - (Ca[:, fixed] @ d[fixed] if fixed.any() else 0.0),
    ])
    if rhs.size:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                if use_sparse:
                    Af, Cf = A[:, free], Ca[:, free]
                    K = sp.bmat(
                        [[H[free][:, free], Af.T, Cf.T], [Af, None, None], [Cf, None, None]],
                        format="csc",
                    )
                    if K.shape[0] != rhs.size:
                        return None
                    sol = spla.spsolve(K, rhs)
                else:
                    Af, Cf = A[:, free], Ca[:, free]
                    z = np.zeros((m_e + k, m_e + k))
                    K = np.block([[H[np.ix_(free, free)], Af.T, Cf.T], [np.vstack([Af, Cf]), z]])
                    sol = np.linalg.solve(K, rhs)
        except (np.linalg.LinAlgError, RuntimeError, ValueError, Warning):
            return None
        if not np.all(np.isfinite(sol)):
            return None
        d[free] = sol[:n_f]
        lam = sol[n_f : n_f + m_e]
        mu_a = sol[n_f + m_e :]
    else:
        lam, mu_a = np.zeros(m_e), np.zeros(0)
    mu = np.zeros(m_i)
    mu[act_c] = mu_a
    if m_e and np.max(np.abs(A @ d - b)) > ftol:
        return None
    if m_i and np.max(C @ d - h) > ftol:
        return None
    if np.any(d < lo - ftol) or np.any(d > hi + ftol):
        return None
    grad = H @ d + g
    if m_e:
        grad = grad + A.T @ lam
    if m_i:
        grad = grad + C.T @ mu
    lam_lo, lam_hi = np.zeros(n), np.zeros(n)
    lam_lo[on_lo] = grad[on_lo]
    lam_hi[on_hi] = -grad[on_hi]
    both = np.intersect1d(on_lo, on_hi)
    lam_lo[both] = np.maximum(grad[both], 0.0)
    lam_hi[both] = np.maximum(-grad[both], 0.0)
    if min(np.min(mu, initial=0.0), np.min(lam_lo), np.min(lam_hi)) < -ftol:
        return None
    if np.max(np.abs(grad[free]), initial=0.0) > ftol:
        return None
    return (
        np.clip(d, lo, hi),
        lam,
        np.maximum(mu, 0.0),
        np.maximum(lam_lo, 0.0),
        np.maximum(lam_hi, 0.0),
    )


def _scatter(n, idx, vals):
    out = np.zeros(n)
    out[idx] = vals
    return out


def _fail(n, m_e, m_i, status, it=0):
    return QpResult(np.zeros(n), np.zeros(m_e), np.zeros(m_i), np.zeros(n), np.zeros(n), status, it)
