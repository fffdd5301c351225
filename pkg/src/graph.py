"""Exnet DAG representation: arena construction, validation, schedules and DOT export."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

from graphviz import Digraph

from src.errors import GraphError, NotAChildError

VertexId = int
ArcId = int

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class Arc:
    id: ArcId
    src: VertexId
    dst: VertexId
    slot: int  # LEFT or RIGHT child slot of src


@dataclass(frozen=True)
class Violation:
    rule: str
    vertex: Optional[VertexId] = None
    arc: Optional[ArcId] = None


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def rules(self) -> List[str]:
        return sorted({v.rule for v in self.violations})


@dataclass(frozen=True)
class ExnetGraph:
    """
    Immutable exnet graph over dense integer ids.

    `children[z]` holds the (left, right) arc ids of an internal vertex; a slot
    may be None only in malformed graphs handed to `validate_exnet`.
    `parents[v]` holds the ids of the arcs entering v, in increasing order.
    """

    n_vertices: int
    arcs: Tuple[Arc, ...]
    children: Mapping[VertexId, Tuple[Optional[ArcId], Optional[ArcId]]]
    parents: Mapping[VertexId, Tuple[ArcId, ...]]
    root: VertexId
    leaves: Tuple[VertexId, ...]
    labels: Tuple[str, ...] = field(default=())

    # ---------- basic queries ----------
    @property
    def vertices(self) -> range:
        return range(self.n_vertices)

    def is_leaf(self, v: VertexId) -> bool:
        return v not in self.children

    @cached_property
    def internal_vertices(self) -> Tuple[VertexId, ...]:
        return tuple(sorted(self.children))

    def arc(self, a: ArcId) -> Arc:
        return self.arcs[a]

    def child_arcs(self, z: VertexId) -> Tuple[ArcId, ArcId]:
        left, right = self.children[z]
        if left is None or right is None:
            raise GraphError(f"Vertex {z} has an empty child slot.")
        return left, right

    def child_vertices(self, z: VertexId) -> Tuple[VertexId, VertexId]:
        left, right = self.child_arcs(z)
        return self.arcs[left].dst, self.arcs[right].dst

    def lch(self, z: VertexId) -> VertexId:
        return self.child_vertices(z)[0]

    def rch(self, z: VertexId) -> VertexId:
        return self.child_vertices(z)[1]

    def parents_of(self, v: VertexId) -> Tuple[ArcId, ...]:
        return self.parents.get(v, ())

    def parent_vertices(self, v: VertexId) -> Tuple[VertexId, ...]:
        return tuple(self.arcs[a].src for a in self.parents_of(v))

    def label(self, v: VertexId) -> str:
        return self.labels[v] if self.labels else str(v)

    @cached_property
    def internal_arcs(self) -> Tuple[ArcId, ...]:
        """Arcs whose destination is internal; these carry complementary propagators."""
        return tuple(a.id for a in self.arcs if not self.is_leaf(a.dst))

    @cached_property
    def is_tree(self) -> bool:
        return all(len(self.parents_of(v)) == 1 for v in self.vertices if v != self.root)

    @cached_property
    def depth(self) -> Tuple[int, ...]:
        """Shortest distance from the root (-1 for unreachable vertices)."""
        dist = [-1] * self.n_vertices
        dist[self.root] = 0
        queue = deque([self.root])
        while queue:
            z = queue.popleft()
            for a in self.children.get(z, ()):
                if a is None:
                    continue
                v = self.arcs[a].dst
                if dist[v] < 0:
                    dist[v] = dist[z] + 1
                    queue.append(v)
        return tuple(dist)

    def role(self, v: VertexId) -> str:
        if v == self.root:
            return "root"
        return "leaf" if self.is_leaf(v) else "internal"

    # ---------- cached schedules (the graph never changes) ----------
    @cached_property
    def report(self) -> "ValidationReport":
        return validate_exnet(self)

    @cached_property
    def up_schedule(self) -> Tuple[VertexId, ...]:
        return tuple(up_order(self))

    @cached_property
    def down_schedule(self) -> Tuple[VertexId, ...]:
        return tuple(down_order(self))


class GraphBuilder:
    """Arena used by every constructor; `freeze` hands out the immutable graph."""

    def __init__(self) -> None:
        self._labels: List[str] = []
        self._slots: Dict[VertexId, List[Optional[VertexId]]] = {}

    @property
    def n_vertices(self) -> int:
        return len(self._labels)

    def add_vertex(self, label: Optional[str] = None) -> VertexId:
        v = len(self._labels)
        self._labels.append(label if label is not None else str(v))
        return v

    def set_children(self, z: VertexId, left: VertexId, right: VertexId) -> None:
        for u in (z, left, right):
            self._check(u)
        if z in self._slots:
            raise GraphError(f"Vertex {z} already has children.")
        self._slots[z] = [left, right]

    def set_slot(self, z: VertexId, slot: int, child: Optional[VertexId]) -> None:
        """Fill a single slot; lets tests describe malformed graphs."""
        self._check(z)
        slots = self._slots.setdefault(z, [None, None])
        slots[slot] = child

    def _check(self, v: VertexId) -> None:
        if not 0 <= v < len(self._labels):
            raise GraphError(f"Unknown vertex id {v}.")

    def freeze(
        self,
        root: Optional[VertexId] = None,
        leaves: Optional[Sequence[VertexId]] = None,
    ) -> ExnetGraph:
        arcs: List[Arc] = []
        children: Dict[VertexId, Tuple[Optional[ArcId], Optional[ArcId]]] = {}
        parents: Dict[VertexId, List[ArcId]] = {v: [] for v in range(self.n_vertices)}

        for z, slots in self._slots.items():
            ids: List[Optional[ArcId]] = []
            for slot, child in enumerate(slots):
                if child is None:
                    ids.append(None)
                    continue
                arc = Arc(id=len(arcs), src=z, dst=child, slot=slot)
                arcs.append(arc)
                parents[child].append(arc.id)
                ids.append(arc.id)
            children[z] = (ids[0], ids[1])

        if root is None:
            parentless = [v for v in range(self.n_vertices) if not parents[v]]
            root = parentless[0] if parentless else 0
        if leaves is None:
            leaves = [v for v in range(self.n_vertices) if v not in children]

        return ExnetGraph(
            n_vertices=self.n_vertices,
            arcs=tuple(arcs),
            children=children,
            parents={v: tuple(sorted(p)) for v, p in parents.items()},
            root=root,
            leaves=tuple(leaves),
            labels=tuple(self._labels),
        )


# ---------- Validation ----------
def validate_exnet(g: ExnetGraph) -> ValidationReport:
    """Check the exnet rules; violations are reported, never raised."""

    violations: List[Violation] = []

    # parent/child consistency
    for z, slots in g.children.items():
        for slot, a in enumerate(slots):
            if a is None:
                violations.append(Violation("binary-children", vertex=z))
                continue
            arc = g.arcs[a]
            if arc.src != z or arc.slot != slot or a not in g.parents_of(arc.dst):
                violations.append(Violation("parent-child-consistency", vertex=z, arc=a))
    for v in g.vertices:
        for a in g.parents_of(v):
            arc = g.arcs[a]
            if arc.dst != v or g.children.get(arc.src, (None, None))[arc.slot] != a:
                violations.append(Violation("parent-child-consistency", vertex=v, arc=a))

    # single root
    parentless = [v for v in g.vertices if not g.parents_of(v)]
    if len(parentless) != 1:
        extra = parentless if parentless else [g.root]
        for v in extra:
            violations.append(Violation("single-root", vertex=v))
    elif parentless[0] != g.root:
        violations.append(Violation("root-mismatch", vertex=g.root))

    # acyclicity (Kahn)
    indegree = {v: len(g.parents_of(v)) for v in g.vertices}
    queue = deque(v for v in g.vertices if indegree[v] == 0)
    seen = 0
    while queue:
        z = queue.popleft()
        seen += 1
        for a in g.children.get(z, ()):
            if a is None:
                continue
            v = g.arcs[a].dst
            indegree[v] -= 1
            if indegree[v] == 0:
                queue.append(v)
    if seen != g.n_vertices:
        for v in g.vertices:
            if indegree[v] > 0:
                violations.append(Violation("acyclic", vertex=v))

    # leaf order covers exactly the childless vertices
    childless = {v for v in g.vertices if g.is_leaf(v)}
    if len(set(g.leaves)) != len(g.leaves) or set(g.leaves) != childless:
        for v in sorted(childless.symmetric_difference(g.leaves)):
            violations.append(Violation("leaf-order", vertex=v))
        if not childless.symmetric_difference(g.leaves):
            violations.append(Violation("leaf-order"))

    return ValidationReport(tuple(violations))


def require_valid(g: ExnetGraph) -> None:
    report = validate_exnet(g)
    if not report.valid:
        raise GraphError(f"Invalid exnet: {', '.join(report.rules())}")


# ---------- Sibling queries ----------
def sibling(g: ExnetGraph, z: VertexId, v: VertexId) -> VertexId:
    if z not in g.children:
        raise NotAChildError(f"Vertex {v} is not a child of leaf {z}.")
    left, right = g.child_vertices(z)
    if v == left:
        return right
    if v == right:
        return left
    raise NotAChildError(f"Vertex {v} is not a child of {z}.")


def arc_sibling(g: ExnetGraph, a: ArcId) -> VertexId:
    """Sibling of the arc's destination with respect to its source, by slot."""
    arc = g.arcs[a]
    left, right = g.child_vertices(arc.src)
    return right if arc.slot == LEFT else left


# ---------- Schedules ----------
def _topological(g: ExnetGraph) -> List[VertexId]:
    indegree = {v: len(g.parents_of(v)) for v in g.vertices}
    queue = deque(v for v in g.vertices if indegree[v] == 0)
    order: List[VertexId] = []
    while queue:
        z = queue.popleft()
        order.append(z)
        for a in g.children.get(z, ()):
            v = g.arcs[a].dst
            indegree[v] -= 1
            if indegree[v] == 0:
                queue.append(v)
    if len(order) != g.n_vertices:
        raise GraphError("Graph contains a cycle.")
    return order


@dataclass(frozen=True)
class _Levels:
    height: Tuple[int, ...]  # longest path down to a leaf
    level: Tuple[int, ...]  # longest path down from the root


def _levels(g: ExnetGraph) -> _Levels:
    order = _topological(g)
    height = [0] * g.n_vertices
    for z in reversed(order):
        if z in g.children:
            height[z] = 1 + max(height[c] for c in g.child_vertices(z))
    level = [0] * g.n_vertices
    for z in order:
        for c in g.child_vertices(z) if z in g.children else ():
            level[c] = max(level[c], level[z] + 1)
    return _Levels(tuple(height), tuple(level))


def up_order(g: ExnetGraph) -> List[VertexId]:
    """Leaves first (in leaf order), then internal vertices by height then id."""
    levels = _levels(g)
    internal = sorted(g.internal_vertices, key=lambda v: (levels.height[v], v))
    return list(g.leaves) + internal


def down_order(g: ExnetGraph) -> List[VertexId]:
    """Internal vertices only, root first; each vertex after all of its parents."""
    levels = _levels(g)
    return sorted(g.internal_vertices, key=lambda v: (levels.level[v], v))


# ---------- DAG -> exnet ----------
def normalize_dag(
    children: Mapping[Hashable, Sequence[Hashable]],
    root: Optional[Hashable] = None,
) -> ExnetGraph:
    """
    Turn an arbitrary single-rooted DAG (node -> ordered children) into an exnet.

    Vertices with one child are spliced out (their parents point at the child;
    a single-child root hands the root role to its child). Vertices with more
    than two children get their children split into two balanced halves, the
    first ceil(k/2) going left; halves of size one attach directly.
    A two-child list is kept as given, repeated child included; longer lists
    are deduplicated first. Original nodes keep their `str` label; new vertices are labelled
    `<parent>#<k>`.
    """

    nodes: List[Hashable] = []
    seen = set()
    for z, kids in children.items():
        for u in (z, *kids):
            if u not in seen:
                seen.add(u)
                nodes.append(u)

    kids: Dict[Hashable, List[Hashable]] = {}
    for u in nodes:
        given = list(children.get(u, ()))
        if len(given) == 2:
            # both slots may name the same child
            kids[u] = given
            continue
        ordered: List[Hashable] = []
        for c in given:
            if c not in ordered:
                ordered.append(c)
        kids[u] = ordered

    parents: Dict[Hashable, List[Hashable]] = {u: [] for u in nodes}
    for u in nodes:
        for c in kids[u]:
            parents[c].append(u)

    indegree = {u: len(parents[u]) for u in nodes}
    queue = deque(u for u in nodes if indegree[u] == 0)
    visited = 0
    while queue:
        u = queue.popleft()
        visited += 1
        for c in kids[u]:
            indegree[c] -= 1
            if indegree[c] == 0:
                queue.append(c)
    if visited != len(nodes):
        raise GraphError("Input graph contains a cycle.")

    roots = [u for u in nodes if not parents[u]]
    if len(roots) != 1:
        raise GraphError(f"Input graph must have exactly one root, found {len(roots)}: {roots}")
    if root is not None and roots[0] != root:
        raise GraphError(f"Declared root {root!r} has parents.")
    top = roots[0]
    original_leaves = [u for u in nodes if not kids[u]]

    # splice single-child vertices
    changed = True
    while changed:
        changed = False
        for u in list(kids):
            if len(kids[u]) != 1:
                continue
            (c,) = kids[u]
            for p in parents[u]:
                kids[p] = [c if x == u else x for x in kids[p]]
                parents[c].append(p)
            parents[c] = [p for p in parents[c] if p != u]
            if u == top:
                top = c
            del kids[u]
            del parents[u]
            changed = True

    # split wide vertices
    counter: Dict[Hashable, int] = {}

    def attach(owner: Hashable, group: List[Hashable]) -> Hashable:
        if len(group) == 1:
            return group[0]
        k = counter.get(owner, 0) + 1
        counter[owner] = k
        fresh = f"{owner}#{k}"
        while fresh in kids:
            k += 1
            counter[owner] = k
            fresh = f"{owner}#{k}"
        kids[fresh] = split(fresh, group)
        return fresh

    def split(owner: Hashable, group: List[Hashable]) -> List[Hashable]:
        cut = math.ceil(len(group) / 2)
        return [attach(owner, group[:cut]), attach(owner, group[cut:])]

    for u in list(kids):
        if len(kids[u]) > 2:
            kids[u] = split(u, kids[u])

    builder = GraphBuilder()
    ids: Dict[Hashable, VertexId] = {}
    for u in kids:
        ids[u] = builder.add_vertex(str(u))
    for u, cs in kids.items():
        if cs:
            builder.set_children(ids[u], ids[cs[0]], ids[cs[1]])
    return builder.freeze(root=ids[top], leaves=[ids[u] for u in original_leaves])


# ---------- DOT export ----------
def to_dot(g: ExnetGraph, name: str = "exnet") -> str:
    """DOT text; vertex labels are id/depth/role and arc labels the ArcId."""
    dot = Digraph(name=name)
    for v in g.vertices:
        dot.node(str(v), f"{v}/{g.depth[v]}/{g.role(v)}")
    for arc in g.arcs:
        dot.edge(str(arc.src), str(arc.dst), label=f"a{arc.id}")
    return dot.source
