import numpy as np
import pytest

from tems.model import UncertaintyDecl
from tems.scenario_tree import (
    RealizationSet,
    TreeError,
    build_tree,
    child,
    default_weights,
    naive_scenario_count,
    sample_box_vertices,
    state_node_count,
)


def _decl(n_sig: int, n_minor: int = 0) -> UncertaintyDecl:
    n = n_sig + n_minor
    return UncertaintyDecl(
        nominal=np.zeros(n), lower=-np.ones(n), upper=np.ones(n),
        significant=[True] * n_sig + [False] * n_minor,
    )


def test_vertices_with_nominal_two_dims():
    # enthalpy/rate-style pair with nominal first in each value list
    decl = UncertaintyDecl(
        nominal=[-950.0, 7.0], lower=[-1235.0, 4.9], upper=[-665.0, 9.1], significant=[True, True]
    )
    rs = sample_box_vertices(decl, include_nominal=True)
    assert len(rs) == 9
    assert {tuple(v) for v in rs.vectors} == {
        (a, b) for a in (-950.0, -665.0, -1235.0) for b in (7.0, 4.9, 9.1)
    }
    np.testing.assert_array_equal(rs.vectors[rs.nominal_index], [-950.0, 7.0])


def test_vertices_one_dim_order():
    decl = UncertaintyDecl([1.0], [0.0], [2.0], [True])
    np.testing.assert_array_equal(sample_box_vertices(decl).vectors.ravel(), [0.0, 1.0, 2.0])


def test_vertices_without_nominal_are_corners():
    rs = sample_box_vertices(_decl(2), include_nominal=False)
    assert len(rs) == 4
    assert rs.nominal_index is None
    assert np.all(np.abs(rs.vectors) == 1.0)


def test_minor_dims_stay_nominal():
    rs = sample_box_vertices(_decl(1, 2))
    assert len(rs) == 3
    np.testing.assert_array_equal(rs.vectors[:, 1:], 0.0)


def test_degenerate_dim_is_deduplicated():
    decl = UncertaintyDecl([1.0, 0.0], [1.0, -1.0], [1.0, 1.0], [True, True])
    assert len(sample_box_vertices(decl)) == 3


def test_no_significant_dims_is_an_error():
    with pytest.raises(TreeError):
        sample_box_vertices(_decl(0, 2))


@pytest.mark.parametrize("s, N, expected_nodes", [(9, 20, 181), (3, 10, 31), (1, 7, 8)])
def test_tree_counts(s, N, expected_nodes):
    tree = build_tree(RealizationSet(np.arange(s, dtype=float)[:, None]), N, 1)
    assert tree.n_scenarios == s
    assert tree.n_nodes == expected_nodes == state_node_count(s, N, 1)


def test_tree_27_scenarios():
    tree = build_tree(sample_box_vertices(_decl(3)), 4, 1)
    assert tree.n_scenarios == 27


def test_tree_full_branching_counts():
    tree = build_tree(RealizationSet(np.arange(2.0)[:, None]), 4, 3)
    assert tree.n_scenarios == 8
    assert tree.n_nodes == 1 + 2 + 4 + 8 + 8 == state_node_count(2, 4, 3)


def test_breadth_first_ids_and_parents():
    tree = build_tree(RealizationSet(np.arange(3.0)[:, None]), 3, 1)
    assert list(tree.stage) == sorted(tree.stage)
    assert tree.n_nonleaf == int(np.sum(tree.stage < tree.N))
    assert np.all(tree.stage[: tree.n_nonleaf] < tree.N)
    for n in range(1, tree.n_nodes):
        assert tree.stage[tree.parent[n]] == tree.stage[n] - 1


def test_child_function():
    tree = build_tree(RealizationSet(np.arange(3.0)[:, None]), 3, 1)
    # realization index 1 (0-based) is the second child of the root
    c = child(tree, 0, 1)
    assert tree.stage[c] == 1 and tree.index_in_stage[c] == 1
    inherited = tree.realization[c]
    assert tree.stage[child(tree, c, inherited)] == 2
    with pytest.raises(TreeError):
        child(tree, c, (inherited + 1) % 3)
    with pytest.raises(TreeError):
        child(tree, tree.leaves[0], 0)


def test_non_anticipativity_structure():
    tree = build_tree(RealizationSet(np.arange(3.0)[:, None]), 5, 1)
    # every scenario shares the root input; after stage 1 paths never merge
    roots = {tree.scenario_node(j, 0) for j in range(tree.n_scenarios)}
    assert roots == {0}
    for k in range(1, tree.N + 1):
        assert len({tree.scenario_node(j, k) for j in range(tree.n_scenarios)}) == 3


def test_default_weights():
    tree = build_tree(RealizationSet(np.arange(9.0)[:, None]), 4, 1)
    w = tree.weights
    assert w[0] == 1.0
    np.testing.assert_allclose(w[tree.leaves], 1.0 / 9.0)
    for k in range(tree.N + 1):
        assert w[tree.stage == k].sum() == pytest.approx(1.0)
    single = build_tree(RealizationSet(np.zeros((1, 1))), 4, 1)
    np.testing.assert_array_equal(single.weights, 1.0)


def test_weights_from_probabilities():
    tree = build_tree(RealizationSet(np.arange(2.0)[:, None]), 3, 2)
    w = default_weights(tree, [0.25, 0.75])
    np.testing.assert_allclose(sorted(w[tree.leaves]), sorted([0.0625, 0.1875, 0.1875, 0.5625]))
    with pytest.raises(TreeError):
        default_weights(tree, [0.5, 0.6])


def test_naive_scenario_count():
    assert naive_scenario_count(3, 10, 1) == 59_049
    assert naive_scenario_count(3, 2, 1) == 9
    assert naive_scenario_count(5, 4, 0) == 1
    with pytest.raises(OverflowError):
        naive_scenario_count(3, 60, 1)


def test_build_tree_rejects_bad_horizons():
    rs = RealizationSet(np.zeros((1, 1)))
    with pytest.raises(TreeError):
        build_tree(rs, 3, 0)
    with pytest.raises(TreeError):
        build_tree(rs, 3, 4)


def test_nominal_path():
    rs = RealizationSet(np.array([[0.0], [1.0], [2.0]]), nominal_index=1)
    tree = build_tree(rs, 4, 1)
    path = tree.nominal_path()
    assert len(path) == 5
    assert all(tree.realization[n] == 1 for n in path[1:])
