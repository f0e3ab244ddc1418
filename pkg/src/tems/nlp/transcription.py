"""Transcription of a scenario-tree optimal control problem into an NLP.

Multiple-shooting style: one state block per tree node, one input block per
non-leaf node, dynamics as equality constraints on every edge and the root
state pinned by an equality. Inputs live on nodes rather than scenarios, so
scenarios that share a node share its input variable and non-anticipativity
holds by construction.

Costs and constraints are evaluated for all nodes in one batched call:
``stage_cost(z, v, v_prev)`` receives ``(P, n)`` arrays for the ``P``
non-leaf nodes in node order, ``terminal_cost(z)`` the leaf states in leaf
order. Per-node data (e.g. tracking references) can therefore be stored in
the cost object as arrays aligned with that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from tems.model import ModelSpec
from tems.nlp.problem import NlpProblem, batched_hessian, batched_jacobian
from tems.scenario_tree import ScenarioTree


class TranscriptionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VariableLayout:
    """Position of every node's state and input inside the decision vector."""

    tree: ScenarioTree
    n_x: int
    n_u: int

    @property
    def n_state_vars(self) -> int:
        return self.tree.n_nodes * self.n_x

    @property
    def n_vars(self) -> int:
        return self.n_state_vars + self.tree.n_nonleaf * self.n_u

    @property
    def z_index(self) -> np.ndarray:
        return np.arange(self.n_state_vars).reshape(self.tree.n_nodes, self.n_x)

    @property
    def v_index(self) -> np.ndarray:
        return self.n_state_vars + np.arange(self.tree.n_nonleaf * self.n_u).reshape(
            self.tree.n_nonleaf, self.n_u
        )

    def z(self, node: int) -> slice:
        return slice(node * self.n_x, (node + 1) * self.n_x)

    def v(self, node: int) -> slice:
        if self.tree.stage[node] >= self.tree.N:
            raise TranscriptionError(f"leaf node {node} has no input")
        start = self.n_state_vars + node * self.n_u
        return slice(start, start + self.n_u)

    def input_of_scenario(self, scenario: int, k: int) -> slice:
        """Variable slice of the input applied at stage ``k`` in ``scenario``."""
        return self.v(self.tree.scenario_node(scenario, k))

    def unpack(self, x):
        x = np.asarray(x)
        Z = x[: self.n_state_vars].reshape(self.tree.n_nodes, self.n_x)
        V = x[self.n_state_vars :].reshape(self.tree.n_nonleaf, self.n_u)
        return Z, V

    def pack(self, Z, V) -> np.ndarray:
        return np.concatenate([np.ravel(Z), np.ravel(V)])


@dataclass(frozen=True)
class ZeroTerminal:
    def __call__(self, z):
        return 0.0 * z[..., 0]


class TreeOcp:
    """Scenario-tree OCP over a fixed tree and model.

    Args:
        tree: Scenario tree; edges use ``tree.realizations`` as ``d``.
        model: Dynamics and constraint functions.
        stage_cost: Batched ``l(z, v, v_prev)``.
        terminal_cost: Batched ``V_f(z)`` on leaves (default zero).
        state_box: ``(n_x, 2)`` bounds for all non-terminal state nodes.
        input_box: ``(n_u, 2)`` bounds for all inputs.
        terminal_box: ``(n_x, 2)`` bounds for leaf states (default ``state_box``).
        initial_state: Root state.
        u_prev: Input applied before the root (for move penalties).
        delta: Constraint tightening, ``g_i + delta_i <= 0`` at every constrained node.
        use_constraints: Include the model's ``g_i`` rows at all.
        root_constraints: Also impose ``g_i`` at the root. Off by default since
            the root state is fixed by the measurement.
        weights: Node weights multiplying the stage cost (default tree weights).
        derivatives: ``"ad"`` or ``"fd"``.
    """

    def __init__(
        self,
        tree: ScenarioTree,
        model: ModelSpec,
        stage_cost: Callable,
        terminal_cost: Callable | None = None,
        state_box=None,
        input_box=None,
        terminal_box=None,
        initial_state=None,
        u_prev=None,
        delta=None,
        use_constraints: bool = True,
        root_constraints: bool = False,
        weights=None,
        derivatives: str = "ad",
    ):
        if tree.realizations.n_d != model.n_d:
            raise TranscriptionError(
                f"tree realizations have {tree.realizations.n_d} dims, model expects {model.n_d}"
            )
        self.tree = tree
        self.model = model
        self.layout = VariableLayout(tree, model.n_x, model.n_u)
        self.stage_cost = stage_cost
        self.terminal_cost = terminal_cost or ZeroTerminal()
        self.state_box = _box(state_box, model.state_bounds, model.n_x, "state_box")
        self.input_box = _box(input_box, model.input_bounds, model.n_u, "input_box")
        self.terminal_box = _box(terminal_box, self.state_box, model.n_x, "terminal_box")
        self.initial_state = _vec(
            model.x0 if initial_state is None else initial_state, model.n_x, "initial_state"
        )
        self.u_prev = _vec(
            self.input_box.mean(axis=1) if u_prev is None else u_prev, model.n_u, "u_prev"
        )
        self.n_c = model.n_c if use_constraints else 0
        self._cnodes = np.arange(0 if root_constraints else 1, tree.n_nodes)
        self.delta = _vec(np.zeros(self.n_c) if delta is None else delta, self.n_c, "delta")
        self.weights = tree.weights if weights is None else _vec(weights, tree.n_nodes, "weights")
        self.derivatives = derivatives

        t = tree
        P = t.n_nonleaf
        self._P = P
        self._children = np.arange(1, t.n_nodes)
        self._edge_parent = t.parent[1:]
        self._edge_d = t.realizations.vectors[t.realization[1:]]
        self._leaves = t.leaves
        # input acting together with each node's state in g_i
        self._node_input = np.where(t.stage < t.N, np.arange(t.n_nodes), t.parent)
        self._cache: dict = {}
        self._build_sparsity()

    def set_parameters(self, initial_state=None, u_prev=None, stage_cost=None, terminal_cost=None):
        """Update per-solve data without rebuilding the sparsity structure."""
        if initial_state is not None:
            self.initial_state = _vec(initial_state, self.model.n_x, "initial_state")
        if u_prev is not None:
            self.u_prev = _vec(u_prev, self.model.n_u, "u_prev")
        if stage_cost is not None:
            self.stage_cost = stage_cost
        if terminal_cost is not None:
            self.terminal_cost = terminal_cost
        self._cache.clear()

    # -- NLP assembly -------------------------------------------------------
    def problem(self, x0=None) -> NlpProblem:
        lo, hi = self._bounds()
        if x0 is None:
            x0 = self.cold_start()
        return NlpProblem(
            n_vars=self.layout.n_vars,
            objective=lambda x: self._eval(x)["f"],
            eq_constraints=lambda x: self._eval(x)["ce"],
            ineq_constraints=lambda x: self._eval(x)["ci"],
            lower=lo,
            upper=hi,
            x0=x0,
            gradient=lambda x: self._eval(x)["g"],
            eq_jacobian=lambda x: self._eval(x)["Je"],
            ineq_jacobian=lambda x: self._eval(x)["Ji"],
            partition=self._partition,
            element_gradients=self._element_gradients,
            element_hessians=self._element_hessians,
            derivatives=self.derivatives,
        )

    def _bounds(self):
        L = self.layout
        t = self.tree
        lo = np.empty(L.n_vars)
        hi = np.empty(L.n_vars)
        zb = np.where((t.stage == t.N)[:, None, None], self.terminal_box[None], self.state_box[None])
        # the root is pinned by an equality; leave it unbounded to avoid a degenerate box
        zb = zb.copy()
        zb[0] = np.tile([-np.inf, np.inf], (L.n_x, 1))
        lo[: L.n_state_vars] = zb[:, :, 0].ravel()
        hi[: L.n_state_vars] = zb[:, :, 1].ravel()
        lo[L.n_state_vars :] = np.tile(self.input_box[:, 0], t.n_nonleaf)
        hi[L.n_state_vars :] = np.tile(self.input_box[:, 1], t.n_nonleaf)
        return lo, hi

    def cold_start(self) -> np.ndarray:
        """Roll out mid-range inputs from the initial state along every edge."""
        t = self.tree
        V = np.tile(self.input_box.mean(axis=1), (t.n_nonleaf, 1))
        return self.layout.pack(self.rollout(V), V)

    def rollout(self, V) -> np.ndarray:
        t = self.tree
        Z = np.empty((t.n_nodes, self.model.n_x))
        Z[0] = self.initial_state
        for k in range(1, t.N + 1):
            nodes = t.nodes_at_stage(k)
            par = t.parent[nodes]
            d = t.realizations.vectors[t.realization[nodes]]
            Z[nodes] = self.model.dynamics(Z[par], V[par], d)
        return Z

    def _build_sparsity(self):
        t, L = self.tree, self.layout
        n_x, n_u = L.n_x, L.n_u
        zi, vi = L.z_index, L.v_index
        E = t.n_nodes - 1
        # equality rows: root pin, then n_x rows per edge in child order
        row_edge = n_x + np.arange(E * n_x).reshape(E, n_x)
        par = self._edge_parent
        self._je_rows = np.concatenate(
            [
                np.arange(n_x),
                row_edge.ravel(),
                np.repeat(row_edge, n_x, axis=1).ravel(),
                np.repeat(row_edge, n_u, axis=1).ravel(),
            ]
        )
        self._je_cols = np.concatenate(
            [
                zi[0],
                zi[self._children].ravel(),
                np.tile(zi[par], (1, n_x)).ravel(),
                np.tile(vi[par], (1, n_x)).ravel(),
            ]
        )
        self.m_eq = n_x * t.n_nodes
        n_c = self.n_c
        cn = self._cnodes
        M = cn.size
        self.m_in = M * n_c
        if n_c:
            rows = np.arange(M * n_c).reshape(M, n_c)
            cols_z = np.broadcast_to(zi[cn][:, None, :], (M, n_c, n_x))
            cols_v = np.broadcast_to(vi[self._node_input[cn]][:, None, :], (M, n_c, n_u))
            self._ji_rows = np.concatenate(
                [np.repeat(rows[..., None], n_x, -1).ravel(), np.repeat(rows[..., None], n_u, -1).ravel()]
            )
            self._ji_cols = np.concatenate([cols_z.ravel(), cols_v.ravel()])
        # elements: root (z0, v0), interior non-leaf (z, v, v_parent), leaves (z, v_parent)
        P = self._P
        parts = [np.concatenate([zi[0], vi[0]])[None, :]]
        self._interior = np.arange(1, P)
        if self._interior.size:
            parts.append(
                np.concatenate(
                    [zi[self._interior], vi[self._interior], vi[t.parent[self._interior]]], axis=1
                )
            )
        parts.append(np.concatenate([zi[self._leaves], vi[t.parent[self._leaves]]], axis=1))
        self._partition = parts

    def _eval(self, x):
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        t, L, model = self.tree, self.layout, self.model
        n_x, n_u = L.n_x, L.n_u
        Z, V = L.unpack(x)
        P = self._P
        method = self.derivatives
        v_prev = np.vstack([self.u_prev[None, :], V[t.parent[1:P]]]) if P > 1 else self.u_prev[None, :]
        lval, ljac = batched_jacobian(self.stage_cost, Z[:P], V, v_prev, method=method)
        lval = np.broadcast_to(lval, (P,))
        w = self.weights[:P]
        tval, tjac = batched_jacobian(self.terminal_cost, Z[self._leaves], method=method)
        tval = np.broadcast_to(tval, (self._leaves.size,))
        f = float(w @ lval + tval.sum())

        g = np.zeros(L.n_vars)
        wl = w[:, None] * ljac
        g[L.z_index[:P]] += wl[:, :n_x]
        g[L.v_index] += wl[:, n_x : n_x + n_u]
        np.add.at(g, L.v_index[t.parent[1:P]], wl[1:, n_x + n_u :])
        g[L.z_index[self._leaves]] += tjac

        par = self._edge_parent
        dyn = lambda z, v, d=self._edge_d: model.dynamics(z, v, d)  # noqa: E731
        F, FJ = batched_jacobian(dyn, Z[par], V[par], method=method)
        ce = np.concatenate([Z[0] - self.initial_state, (Z[1:] - F).ravel()])
        E = par.size
        je_vals = np.concatenate(
            [
                np.ones(n_x),
                np.ones(E * n_x),
                -FJ[:, :, :n_x].ravel(),
                -FJ[:, :, n_x:].ravel(),
            ]
        )
        Je = sp.csr_matrix((je_vals, (self._je_rows, self._je_cols)), shape=(self.m_eq, L.n_vars))

        out = {"f": f, "g": g, "ce": ce, "Je": Je, "ljac": ljac, "tjac": tjac, "FJ": FJ}
        if self.n_c:
            cn = self._cnodes
            gfun = lambda z, v: model.constraint_values(z, v)  # noqa: E731
            G, GJ = batched_jacobian(gfun, Z[cn], V[self._node_input[cn]], method=method)
            G = np.broadcast_to(G, (cn.size, self.n_c))
            out["ci"] = (G + self.delta).ravel()
            ji_vals = np.concatenate([GJ[..., :n_x].ravel(), GJ[..., n_x:].ravel()])
            out["Ji"] = sp.csr_matrix(
                (ji_vals, (self._ji_rows, self._ji_cols)), shape=(self.m_in, L.n_vars)
            )
            out["GJ"] = GJ
        else:
            out["ci"] = np.zeros(0)
            out["Ji"] = sp.csr_matrix((0, L.n_vars))
        if len(self._cache) > 4:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _element_gradients(self, x, lam_eq, lam_in):
        ev = self._eval(x)
        t, L = self.tree, self.layout
        n_x, n_u = L.n_x, L.n_u
        P = self._P
        w = self.weights[:P]
        # nonlinear Lagrangian parts per non-leaf node: weighted stage cost, minus dynamics
        # of outgoing edges, plus constraint rows
        node = np.zeros((t.n_nodes, n_x + n_u))
        node[:P] += w[:, None] * ev["ljac"][:, : n_x + n_u]
        lam_edges = lam_eq[n_x:].reshape(-1, n_x)
        np.add.at(node, self._edge_parent, -np.einsum("ei,eij->ej", lam_edges, ev["FJ"]))
        if self.n_c:
            mu = lam_in.reshape(-1, self.n_c)
            node[self._cnodes] += np.einsum("mc,mcj->mj", mu, ev["GJ"])
        out = [node[0][None, :]]
        if self._interior.size:
            ii = self._interior
            out.append(
                np.concatenate([node[ii], w[ii, None] * ev["ljac"][ii, n_x + n_u :]], axis=1)
            )
        leaves = self._leaves
        leaf = node[leaves].copy()
        leaf[:, :n_x] += ev["tjac"]
        out.append(leaf)
        return out


    def _second_derivatives(self, x):
        ev = self._eval(x)
        if "Hl" in ev:
            return ev
        t, L, model = self.tree, self.layout, self.model
        Z, V = L.unpack(x)
        P = self._P
        method = self.derivatives
        v_prev = np.vstack([self.u_prev[None, :], V[t.parent[1:P]]]) if P > 1 else self.u_prev[None, :]
        k = L.n_x + 2 * L.n_u
        ev["Hl"] = np.broadcast_to(
            batched_hessian(self.stage_cost, Z[:P], V, v_prev, method=method), (P, k, k)
        )
        ev["Ht"] = np.broadcast_to(
            batched_hessian(self.terminal_cost, Z[self._leaves], method=method),
            (self._leaves.size, L.n_x, L.n_x),
        )
        par = self._edge_parent
        dyn = lambda z, v, d=self._edge_d: self.model.dynamics(z, v, d)  # noqa: E731
        ev["HF"] = batched_hessian(dyn, Z[par], V[par], method=method)
        if self.n_c:
            gfun = lambda z, v: model.constraint_values(z, v)  # noqa: E731
            m = L.n_x + L.n_u
            cn = self._cnodes
            ev["HG"] = np.broadcast_to(
                batched_hessian(gfun, Z[cn], V[self._node_input[cn]], method=method),
                (cn.size, self.n_c, m, m),
            )
        return ev

    def _element_hessians(self, x, lam_eq, lam_in):
        ev = self._second_derivatives(x)
        t, L = self.tree, self.layout
        n_x, n_u = L.n_x, L.n_u
        m = n_x + n_u
        P = self._P
        w = self.weights[:P]
        Hl = w[:, None, None] * ev["Hl"]
        node = np.zeros((t.n_nodes, m, m))
        node[:P] += Hl[:, :m, :m]
        lam_edges = lam_eq[n_x:].reshape(-1, n_x)
        np.add.at(node, self._edge_parent, -np.einsum("ei,eijk->ejk", lam_edges, ev["HF"]))
        if self.n_c:
            mu = lam_in.reshape(-1, self.n_c)
            node[self._cnodes] += np.einsum("mc,mcjk->mjk", mu, ev["HG"])
        out = [node[:1]]
        ii = self._interior
        if ii.size:
            out.append(np.block([[node[ii], Hl[ii, :m, m:]], [Hl[ii, m:, :m], Hl[ii, m:, m:]]]))
        leaf = node[self._leaves].copy()
        leaf[:, :n_x, :n_x] += ev["Ht"]
        out.append(leaf)
        return out


def _box(box, default, n, name):
    b = np.array(default if box is None else box, dtype=float).reshape(n, 2)
    if np.any(b[:, 0] > b[:, 1]):
        raise TranscriptionError(f"{name} is empty")
    return b


def _vec(v, n, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (n,):
        raise TranscriptionError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def transcribe(
    tree: ScenarioTree,
    model: ModelSpec,
    stage_cost,
    terminal_cost=None,
    state_box=None,
    input_box=None,
    terminal_box=None,
    initial_state=None,
    **kwargs,
) -> tuple[NlpProblem, VariableLayout]:
    """Build the NLP of a scenario-tree OCP and its variable layout."""
    ocp = TreeOcp(
        tree,
        model,
        stage_cost,
        terminal_cost,
        state_box=state_box,
        input_box=input_box,
        terminal_box=terminal_box,
        initial_state=initial_state,
        **kwargs,
    )
    return ocp.problem(), ocp.layout
