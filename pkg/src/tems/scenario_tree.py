"""Scenario trees over a finite set of uncertainty realizations.

Nodes are numbered breadth-first; children of a node are ordered by the
realization list. Realization indices are 0-based. Up to the robust horizon
every node branches into all ``s`` realizations; afterwards each node has a
single child that keeps its parent's realization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from tems.model import UncertaintyDecl

MAX_SCENARIOS = 2**63 - 1


class TreeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RealizationSet:
    """Finite uncertainty set: ``vectors`` has shape ``(s, n_d)``."""

    vectors: np.ndarray
    nominal_index: int | None = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        object.__setattr__(self, "vectors", v)
        if v.shape[0] == 0:
            raise TreeError("realization set is empty")
        if self.nominal_index is not None and not 0 <= self.nominal_index < len(v):
            raise TreeError(f"nominal_index {self.nominal_index} out of range")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_d(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def nominal_only(cls, decl: UncertaintyDecl) -> "RealizationSet":
        return cls(decl.nominal[None, :], nominal_index=0)


def sample_box_vertices(
    decl: UncertaintyDecl, include_nominal: bool = True, dims=None
) -> RealizationSet:
    """Cartesian product of extreme (and nominal) values of the chosen dims.

    Dimensions outside ``dims`` (default: the significant ones) stay at their
    nominal value. Per dimension the values are ordered lower, nominal, upper.
    """
    if dims is None:
        dims = np.flatnonzero(decl.significant)
    dims = [int(i) for i in np.atleast_1d(dims)]
    if not dims:
        raise TreeError("no dimensions to sample (empty significant set)")
    per_dim = []
    for i in dims:
        vals = [decl.lower[i], decl.nominal[i], decl.upper[i]]
        if not include_nominal:
            vals = [decl.lower[i], decl.upper[i]]
        per_dim.append(list(dict.fromkeys(vals)))
    # values are unique per dimension, so the product has no duplicates
    combos = np.array(list(itertools.product(*per_dim)), dtype=float)
    vectors = np.tile(decl.nominal, (combos.shape[0], 1))
    vectors[:, dims] = combos
    hits = np.flatnonzero(np.all(vectors == decl.nominal, axis=1))
    return RealizationSet(vectors, int(hits[0]) if hits.size else None)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Immutable scenario tree.

    Attributes:
        N: Prediction horizon.
        N_R: Robust horizon.
        realizations: The finite set the edges draw from.
        stage: Stage ``k`` of each node.
        parent: Parent node id, ``-1`` for the root.
        realization: Realization index on the edge from the parent (``-1`` at root).
        index_in_stage: Position ``j`` of the node within its stage.
        children: ``(n_nodes, s)`` child ids, ``-1`` where no child exists.
        weights: Node weights.
    """

    N: int
    N_R: int
    realizations: RealizationSet
    stage: np.ndarray
    parent: np.ndarray
    realization: np.ndarray
    index_in_stage: np.ndarray
    children: np.ndarray
    weights: np.ndarray

    @property
    def s(self) -> int:
        return len(self.realizations)

    @property
    def n_nodes(self) -> int:
        return self.stage.size

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.stage == self.N)

    @property
    def n_scenarios(self) -> int:
        return int(np.sum(self.stage == self.N))

    @property
    def n_nonleaf(self) -> int:
        """Number of nodes carrying an input; they are ids ``0 .. n_nonleaf-1``."""
        return int(np.sum(self.stage < self.N))

    def nodes_at_stage(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.stage == k)

    def path(self, node: int) -> list[int]:
        """Node ids from the root down to ``node``."""
        out = [int(node)]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def ancestor(self, node: int, k: int) -> int:
        """Ancestor of ``node`` at stage ``k`` (``k <= stage[node]``)."""
        node = int(node)
        while self.stage[node] > k:
            node = int(self.parent[node])
        return node

    def scenario_node(self, scenario: int, k: int) -> int:
        """Node at stage ``k`` on the path of scenario (leaf position) ``scenario``."""
        return self.ancestor(self.leaves[scenario], k)

    def nominal_path(self) -> list[int]:
        """Path whose edges all carry the nominal realization."""
        r = self.realizations.nominal_index
        if r is None:
            raise TreeError("realization set has no nominal element")
        node, out = 0, [0]
        while self.stage[node] < self.N:
            node = child(self, node, r)
            out.append(node)
        return out

    def leaves_below(self) -> np.ndarray:
        counts = (self.stage == self.N).astype(int)
        for k in range(self.N, 0, -1):
            nodes = self.nodes_at_stage(k)
            np.add.at(counts, self.parent[nodes], counts[nodes])
        return counts

    def summary(self) -> dict:
        return {
            "N": int(self.N),
            "N_R": int(self.N_R),
            "realizations": int(self.s),
            "scenarios": self.n_scenarios,
            "state_nodes": self.n_nodes,
            "input_nodes": self.n_nonleaf,
            "stage_weight_sums": [
                float(self.weights[self.stage == k].sum()) for k in range(self.N + 1)
            ],
        }


def build_tree(realizations: RealizationSet, N: int, N_R: int, probabilities=None) -> ScenarioTree:
    """Build the tree breadth-first with branching up to stage ``N_R``."""
    if not (isinstance(N, (int, np.integer)) and isinstance(N_R, (int, np.integer))):
        raise TreeError("horizons must be integers")
    if not 1 <= N_R <= N:
        raise TreeError(f"need 1 <= N_R <= N, got N={N}, N_R={N_R}")
    s = len(realizations)
    stage, parent, real, jdx = [np.zeros(1, int)], [np.full(1, -1)], [np.full(1, -1)], [np.zeros(1, int)]
    frontier = np.zeros(1, dtype=int)
    n = 1
    for k in range(1, N + 1):
        if k <= N_R:
            par = np.repeat(frontier, s)
            r = np.tile(np.arange(s), frontier.size)
        else:
            par = frontier
            r = real[-1]
        ids = np.arange(n, n + par.size)
        stage.append(np.full(par.size, k))
        parent.append(par)
        real.append(r)
        jdx.append(np.arange(par.size))
        frontier, n = ids, n + par.size
    stage, parent, real = np.concatenate(stage), np.concatenate(parent), np.concatenate(real)
    children = np.full((n, s), -1, dtype=int)
    children[parent[1:], real[1:]] = np.arange(1, n)
    tree = ScenarioTree(
        N=int(N),
        N_R=int(N_R),
        realizations=realizations,
        stage=stage,
        parent=parent,
        realization=real,
        index_in_stage=np.concatenate(jdx),
        children=children,
        weights=np.zeros(n),
    )
    object.__setattr__(tree, "weights", default_weights(tree, probabilities))
    for arr in ("stage", "parent", "realization", "index_in_stage", "children", "weights"):
        getattr(tree, arr).setflags(write=False)
    return tree


def child(tree: ScenarioTree, node: int, r: int) -> int:
    """Child of ``node`` reached under realization index ``r``."""
    if not 0 <= node < tree.n_nodes:
        raise TreeError(f"node {node} does not exist")
    if tree.stage[node] >= tree.N:
        raise TreeError(f"node {node} is a leaf")
    if not 0 <= r < tree.s:
        raise TreeError(f"realization index {r} out of range")
    c = tree.children[node, r]
    if c < 0:
        raise TreeError(
            f"realization {r} unavailable at node {node} beyond the robust horizon "
            f"(inherited realization is {tree.realization[node]})"
        )
    return int(c)


def default_weights(tree: ScenarioTree, probabilities=None) -> np.ndarray:
    """Node weights.

    Without ``probabilities`` every scenario is equally likely, so a node's
    weight is its share of the leaves. Otherwise a node's weight is the
    product of the probabilities on the branching edges of its path.
    """
    if probabilities is None:
        # branching is uniform within a stage: every node holds the same share of leaves
        return 1.0 / np.bincount(tree.stage)[tree.stage]
    p = np.asarray(probabilities, dtype=float)
    if p.shape != (tree.s,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise TreeError("probabilities must be a distribution over the realizations")
    w = np.ones(tree.n_nodes)
    for k in range(1, tree.N + 1):
        nodes = tree.nodes_at_stage(k)
        factor = p[tree.realization[nodes]] if k <= tree.N_R else 1.0
        w[nodes] = w[tree.parent[nodes]] * factor
    return w


def naive_scenario_count(values_per_dim: int, n_dims: int, N_R: int) -> int:
    """Scenarios of a full-branching tree: ``values_per_dim ** (n_dims * N_R)``."""
    if values_per_dim < 1 or n_dims < 0 or N_R < 0:
        raise TreeError("arguments must be positive")
    count = int(values_per_dim) ** (int(n_dims) * int(N_R))
    if count > MAX_SCENARIOS:
        raise OverflowError(
            f"{values_per_dim}^({n_dims}*{N_R}) scenarios exceed the 64-bit count limit"
        )
    return count


def state_node_count(s: int, N: int, N_R: int) -> int:
    """Closed form ``sum_k s^min(k, N_R)``."""
    return sum(s ** min(k, N_R) for k in range(N + 1))
