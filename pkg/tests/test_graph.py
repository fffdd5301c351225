import numpy as np
import pytest

from src.builders import build_sequence_tree
from src.errors import GraphError, NotAChildError
from src.graph import (
    LEFT,
    GraphBuilder,
    arc_sibling,
    down_order,
    normalize_dag,
    require_valid,
    sibling,
    to_dot,
    up_order,
    validate_exnet,
)


def _three_vertex():
    b = GraphBuilder()
    x, y, r = b.add_vertex("x"), b.add_vertex("y"), b.add_vertex("r")
    b.set_children(r, x, y)
    return b.freeze(), (x, y, r)


# ---------- validation ----------
def test_balanced_tree_is_valid():
    g = build_sequence_tree(8).graph
    report = validate_exnet(g)
    assert report.valid
    assert report.violations == ()


def test_two_parentless_vertices_violate_single_root():
    b = GraphBuilder()
    x, y, r, stray = (b.add_vertex() for _ in range(4))
    b.set_children(r, x, y)
    g = b.freeze(root=r)
    assert "single-root" in validate_exnet(g).rules()


def test_half_filled_child_slots_violate_binary_children():
    b = GraphBuilder()
    x, y, r = (b.add_vertex() for _ in range(3))
    b.set_children(r, x, y)
    z = b.add_vertex()
    b.set_slot(z, LEFT, r)
    g = b.freeze(root=z)
    report = validate_exnet(g)
    assert not report.valid
    assert "binary-children" in report.rules()
    with pytest.raises(GraphError):
        require_valid(g)


def test_both_slots_on_one_child_get_distinct_arcs():
    b = GraphBuilder()
    x, y = b.add_vertex(), b.add_vertex()
    q = b.add_vertex()
    b.set_children(q, x, y)
    s = b.add_vertex()
    b.set_children(s, q, q)
    g = b.freeze(root=s)
    assert validate_exnet(g).valid
    left, right = g.child_arcs(s)
    assert left != right
    assert g.parents_of(q) == (left, right)
    assert arc_sibling(g, left) == q and arc_sibling(g, right) == q


# ---------- siblings ----------
def test_sibling_swaps_children():
    g, (x, y, r) = _three_vertex()
    assert sibling(g, r, x) == y
    assert sibling(g, r, y) == x


def test_sibling_of_non_child_raises():
    g, (x, y, r) = _three_vertex()
    with pytest.raises(NotAChildError):
        sibling(g, r, r)


def test_sibling_is_an_involution_on_every_arc(diamond):
    g = diamond.graph
    for arc in g.arcs:
        assert sibling(g, arc.src, sibling(g, arc.src, arc.dst)) == arc.dst


# ---------- schedules ----------
def test_up_order_three_vertex_tree():
    g, (x, y, r) = _three_vertex()
    assert up_order(g) == [x, y, r]
    assert down_order(g) == [r]


def test_balanced_tree_orders():
    g = build_sequence_tree(4).graph
    order = up_order(g)
    assert order[:4] == list(g.leaves)
    assert order[-1] == g.root
    assert set(order[4:6]) == set(g.child_vertices(g.root))

    g8 = build_sequence_tree(8).graph
    depths = [g8.depth[v] for v in down_order(g8)]
    assert depths == sorted(depths)
    assert depths[0] == 0 and len(depths) == 7


def test_diamond_orders_respect_every_arc(diamond):
    g = diamond.graph
    up = {v: i for i, v in enumerate(up_order(g))}
    down = {v: i for i, v in enumerate(down_order(g))}
    assert sorted(up) == list(g.vertices)
    assert sorted(down) == list(g.internal_vertices)
    for arc in g.arcs:
        assert up[arc.dst] < up[arc.src]
        if not g.is_leaf(arc.dst):
            assert down[arc.src] < down[arc.dst]
    join = next(v for v in g.vertices if len(g.parents_of(v)) == 2)
    assert all(down[p] < down[join] for p in g.parent_vertices(join))


# ---------- normalize_dag ----------
def test_star_root_splits_into_two_pairs():
    g = normalize_dag({"r": ["a", "b", "c", "d"]})
    assert validate_exnet(g).valid
    assert g.n_vertices == 7
    mids = g.child_vertices(g.root)
    assert all(not g.is_leaf(m) for m in mids)
    grouped = [{g.label(c) for c in g.child_vertices(m)} for m in mids]
    assert grouped == [{"a", "b"}, {"c", "d"}]


def test_single_child_chain_is_spliced_away():
    g = normalize_dag({"r": ["a", "m"], "m": ["c"]})
    assert validate_exnet(g).valid
    assert "m" not in {g.label(v) for v in g.vertices}
    assert {g.label(v) for v in g.child_vertices(g.root)} == {"a", "c"}


def test_pure_chain_collapses_to_its_leaf():
    g = normalize_dag({"a": ["b"], "b": ["c"]})
    assert g.n_vertices == 1
    assert g.label(g.root) == "c"


def test_valid_exnet_passes_through_unchanged():
    g = normalize_dag({"r": ["a", "b"], "a": ["x", "y"]})
    assert g.n_vertices == 5
    assert len(g.arcs) == 4
    assert [g.label(v) for v in g.leaves] == ["b", "x", "y"]


def test_repeated_child_in_both_slots_is_kept():
    g = normalize_dag({"r": ["a", "b"], "a": ["x", "x"], "b": ["y", "z"]})
    assert validate_exnet(g).valid
    assert g.n_vertices == 6
    assert len(g.arcs) == 6
    a = next(v for v in g.vertices if g.label(v) == "a")
    assert [g.label(c) for c in g.child_vertices(a)] == ["x", "x"]
    assert [g.label(v) for v in g.leaves] == ["x", "y", "z"]


def test_longer_child_lists_drop_repeats():
    g = normalize_dag({"r": ["a", "a", "b"]})
    assert g.n_vertices == 3
    assert [g.label(c) for c in g.child_vertices(g.root)] == ["a", "b"]


def test_cycles_and_several_roots_are_rejected():
    with pytest.raises(GraphError):
        normalize_dag({"a": ["b", "c"], "b": ["a", "c"]})
    with pytest.raises(GraphError):
        normalize_dag({"r": ["a", "b"], "s": ["a", "c"]})


@pytest.mark.parametrize("seed", range(10))
def test_random_dags_normalize_to_valid_exnets(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(5, 200))
    children = {i: [] for i in range(size)}
    for i in range(1, size):
        for p in rng.choice(i, size=min(i, int(rng.integers(1, 4))), replace=False):
            children[int(p)].append(i)
    leaves = {str(i) for i, kids in children.items() if not kids}

    g = normalize_dag(children)
    assert validate_exnet(g).valid
    assert {g.label(v) for v in g.leaves} == leaves
    assert all(g.depth[v] >= 0 for v in g.vertices)


# ---------- DOT ----------
def test_dot_lists_vertices_and_arcs():
    g = build_sequence_tree(4).graph
    text = to_dot(g)
    lines = text.splitlines()
    assert sum("->" in line for line in lines) == 6
    assert sum("[label=" in line and "->" not in line for line in lines) == 7
    assert f"{g.root}/0/root" in text
