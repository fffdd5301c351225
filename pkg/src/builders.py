"""Exnet families: sequence and image trees, multi-layer, attention, supernodes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, Union

from src.errors import ConfigError, GraphError
from src.graph import LEFT, RIGHT, ArcId, ExnetGraph, GraphBuilder, VertexId, normalize_dag, up_order
from src.utils import get_logger, make_rng

logger = get_logger(__name__)

Pixel = Tuple[int, int]
Slot = Union[int, Pixel, None]

# Guard against image trees that would not fit in memory (2**(depth+1) - 1 vertices).
MAX_IMAGE_VERTICES = 1 << 17


@dataclass(frozen=True)
class ShareScheme:
    """
    Sharing groups: every internal vertex and every arc into an internal vertex
    carries a group label. Equal labels mean shared parameters. Vertex and arc
    labels live in disjoint namespaces.
    """

    vertex_groups: Mapping[VertexId, str]
    arc_groups: Mapping[ArcId, str]

    @classmethod
    def unshared(cls, g: ExnetGraph) -> "ShareScheme":
        return cls(
            vertex_groups={v: f"v{v}" for v in g.internal_vertices},
            arc_groups={a: f"a{a}" for a in g.internal_arcs},
        )

    def groups(self) -> Dict[str, List[Tuple[str, int]]]:
        """label -> members as ("vertex", id) / ("arc", id)."""
        out: Dict[str, List[Tuple[str, int]]] = {}
        for v, label in sorted(self.vertex_groups.items()):
            out.setdefault(label, []).append(("vertex", v))
        for a, label in sorted(self.arc_groups.items()):
            out.setdefault(label, []).append(("arc", a))
        return out

    @property
    def is_shared(self) -> bool:
        return any(len(m) > 1 for m in self.groups().values())

    def problems(self, g: ExnetGraph) -> List[str]:
        found = []
        if set(self.vertex_groups) != set(g.internal_vertices):
            found.append("vertex groups must cover exactly the internal vertices")
        if set(self.arc_groups) != set(g.internal_arcs):
            found.append("arc groups must cover exactly the arcs into internal vertices")
        mixed = set(self.vertex_groups.values()) & set(self.arc_groups.values())
        if mixed:
            found.append(f"groups mix vertex and arc parameters: {sorted(mixed)[:3]}")
        return found


@dataclass(frozen=True)
class Region:
    h: float
    h2: float
    v: float
    v2: float

    def __post_init__(self) -> None:
        if self.h > self.h2 or self.v > self.v2:
            raise GraphError(f"Empty region bounds: {self}")

    def pixel(self, n: int) -> Optional[Pixel]:
        """The unique integer pixel inside the region, if any."""
        i, j = math.ceil(self.h), math.ceil(self.v)
        if i <= self.h2 and j <= self.v2 and 1 <= i <= n and 1 <= j <= n:
            return (i, j)
        return None

    def contains(self, pixel: Pixel) -> bool:
        i, j = pixel
        return self.h <= i <= self.h2 and self.v <= j <= self.v2


@dataclass(frozen=True)
class BuilderOutput:
    graph: ExnetGraph
    sharing: ShareScheme
    leaf_binding: Mapping[VertexId, Slot]
    n_slots: int
    name: str = "exnet"
    regions: Optional[Mapping[VertexId, Region]] = None
    image_size: Optional[int] = None

    def slot_index(self, leaf: VertexId) -> Optional[int]:
        """Flat token slot of a leaf; pixels (i, j) map to (i-1)*n + (j-1)."""
        slot = self.leaf_binding[leaf]
        if slot is None:
            return None
        if isinstance(slot, tuple):
            i, j = slot
            return (i - 1) * int(self.image_size) + (j - 1)
        return int(slot)


# ---------- Sharing bookkeeping ----------
class _Groups:
    """Collect labels by (vertex) and by (parent, slot) until the graph is frozen."""

    def __init__(self) -> None:
        self.vertex: Dict[VertexId, str] = {}
        self.slot: Dict[Tuple[VertexId, int], str] = {}

    def scheme(self, g: ExnetGraph) -> ShareScheme:
        vertex_groups = {v: self.vertex.get(v, f"v{v}") for v in g.internal_vertices}
        arc_groups = {}
        for a in g.internal_arcs:
            arc = g.arcs[a]
            arc_groups[a] = self.slot.get((arc.src, arc.slot), f"a{a}")
        return ShareScheme(vertex_groups, arc_groups)


@dataclass(frozen=True)
class TreeVertex:
    vertex: VertexId
    depth: int
    index: int  # preorder position within the tree
    side: Optional[int]  # slot in the tree parent; None at the tree root


@dataclass(frozen=True)
class TreeSlot:
    parent: VertexId
    slot: int
    child: VertexId
    depth: int  # depth of the child
    parent_index: int
    child_is_tree_leaf: bool


@dataclass
class TreeRecord:
    root: VertexId
    internal: List[TreeVertex] = field(default_factory=list)
    slots: List[TreeSlot] = field(default_factory=list)


def balanced_tree(
    builder: GraphBuilder,
    leaves: Sequence[VertexId],
    root: Optional[VertexId] = None,
    label: str = "t",
) -> TreeRecord:
    """
    Balanced binary tree over `leaves` (left half gets ceil(m/2)). Interior
    vertices are new; `root`, if given, becomes the tree root. A single leaf
    without a requested root collapses to the leaf itself.
    """
    leaves = list(leaves)
    if not leaves:
        raise GraphError("A balanced tree needs at least one leaf.")
    if len(leaves) == 1:
        if root is not None:
            raise GraphError(f"Vertex {root} cannot root a tree with a single leaf.")
        return TreeRecord(root=leaves[0])

    record = TreeRecord(root=-1)
    counter = itertools.count()

    def grow(group: List[VertexId], depth: int, side: Optional[int], vertex: Optional[VertexId]) -> VertexId:
        if len(group) == 1:
            return group[0]
        index = next(counter)
        v = vertex if vertex is not None else builder.add_vertex(f"{label}.{index}")
        record.internal.append(TreeVertex(v, depth, index, side))
        cut = math.ceil(len(group) / 2)
        left = grow(group[:cut], depth + 1, LEFT, None)
        right = grow(group[cut:], depth + 1, RIGHT, None)
        builder.set_children(v, left, right)
        record.slots.append(TreeSlot(v, LEFT, left, depth + 1, index, len(group[:cut]) == 1))
        record.slots.append(TreeSlot(v, RIGHT, right, depth + 1, index, len(group[cut:]) == 1))
        return v

    record.root = grow(leaves, 0, None, root)
    return record


def _depthwise(groups: _Groups, record: TreeRecord, prefix: str, by_side: bool) -> None:
    """Vertices/arcs at equal depth share; optionally split by left/right side."""
    side_name = {None: "root", LEFT: "L", RIGHT: "R"}
    for tv in record.internal:
        key = f"{side_name[tv.side]}{tv.depth}" if by_side else f"d{tv.depth}"
        groups.vertex[tv.vertex] = f"{prefix}:{key}"
    for ts in record.slots:
        key = f"{side_name[ts.slot]}{ts.depth}" if by_side else f"d{ts.depth}"
        groups.slot[(ts.parent, ts.slot)] = f"{prefix}-arc:{key}"


# ---------- Sequence trees ----------
def build_sequence_tree(n: int, share_by_depth: bool = True) -> BuilderOutput:
    """Balanced tree over n leaves; leaf i is bound to sequence slot i."""
    if n < 2:
        raise ConfigError(f"A sequence tree needs n >= 2 leaves, got {n}")
    builder = GraphBuilder()
    leaves = [builder.add_vertex(f"x{i}") for i in range(n)]
    record = balanced_tree(builder, leaves, label="seq")
    groups = _Groups()
    if share_by_depth:
        _depthwise(groups, record, "seq", by_side=True)
    g = builder.freeze(root=record.root, leaves=leaves)
    return BuilderOutput(
        graph=g,
        sharing=groups.scheme(g),
        leaf_binding={leaf: i for i, leaf in enumerate(leaves)},
        n_slots=n,
        name=f"sequence_tree(n={n})",
    )


# ---------- Image trees ----------
def image_tree_depth(n: int, overlap: float) -> int:
    """Depth of the image tree; every split shrinks one side by the overlap factor."""
    h_len = v_len = float(n - 1)
    depth = 0
    horizontal = True
    while not (h_len < 1 and v_len < 1):
        if horizontal:
            h_len *= overlap
        else:
            v_len *= overlap
        horizontal = not horizontal
        depth += 1
    return depth


def build_image_exnet(n: int, overlap: float, share_by_depth: bool = True) -> BuilderOutput:
    """
    Tree over overlapping image regions. Class-A vertices (root included) split
    the horizontal range, class-B vertices the vertical one; a vertex whose
    region is narrower than one pixel in both directions is a leaf.
    """
    if n < 2:
        raise ConfigError(f"Image size must be >= 2, got {n}")
    if not 0.5 <= overlap < 1.0:
        raise ConfigError(f"Overlap level must satisfy 1/2 <= overlap < 1, got {overlap}")
    depth = image_tree_depth(n, overlap)
    if 2 ** (depth + 1) - 1 > MAX_IMAGE_VERTICES:
        raise ConfigError(
            f"Image tree for n={n}, overlap={overlap} would have {2 ** (depth + 1) - 1} vertices"
        )

    builder = GraphBuilder()
    regions: Dict[VertexId, Region] = {}
    leaves: List[VertexId] = []
    groups = _Groups()
    side_name = {None: "root", LEFT: "L", RIGHT: "R"}

    def grow(region: Region, class_a: bool, depth: int, side: Optional[int]) -> VertexId:
        v = builder.add_vertex(f"[{region.h:g},{region.h2:g}]x[{region.v:g},{region.v2:g}]")
        regions[v] = region
        if region.h2 - region.h < 1 and region.v2 - region.v < 1:
            leaves.append(v)
            return v
        if class_a:
            span = region.h2 - region.h
            left = Region(region.h, region.h + overlap * span, region.v, region.v2)
            right = Region(region.h2 - overlap * span, region.h2, region.v, region.v2)
        else:
            span = region.v2 - region.v
            left = Region(region.h, region.h2, region.v, region.v + overlap * span)
            right = Region(region.h, region.h2, region.v2 - overlap * span, region.v2)
        lv = grow(left, not class_a, depth + 1, LEFT)
        rv = grow(right, not class_a, depth + 1, RIGHT)
        builder.set_children(v, lv, rv)
        if share_by_depth:
            groups.vertex[v] = f"img:{side_name[side]}{depth}"
            groups.slot[(v, LEFT)] = f"img-arc:L{depth + 1}"
            groups.slot[(v, RIGHT)] = f"img-arc:R{depth + 1}"
        return v

    root = grow(Region(1.0, float(n), 1.0, float(n)), True, 0, None)
    g = builder.freeze(root=root, leaves=leaves)
    binding = {leaf: regions[leaf].pixel(n) for leaf in leaves}
    logger.debug("🖼️ Image exnet n=%d overlap=%g: %d vertices", n, overlap, g.n_vertices)
    return BuilderOutput(
        graph=g,
        sharing=groups.scheme(g),
        leaf_binding=binding,
        n_slots=n * n,
        name=f"image(n={n},overlap={overlap:g})",
        regions=regions,
        image_size=n,
    )


# ---------- Multi-layer exnets ----------
def build_multilayer(layer_sizes: Sequence[int]) -> BuilderOutput:
    """
    Layers G_1 (leaves) ... G_L (root); every vertex of G_{i+1} roots its own
    balanced tree over all of G_i, so lower layers gain several parents.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or sizes[-1] != 1 or any(s < 1 for s in sizes):
        raise ConfigError(f"Layer sizes must have length >= 2, end in 1 and be >= 1: {sizes}")
    if any(s < 2 for s in sizes[:-1]):
        raise ConfigError(f"Every layer below the root needs >= 2 vertices: {sizes}")

    builder = GraphBuilder()
    layers = [[builder.add_vertex(f"g1.{k}") for k in range(sizes[0])]]
    for i, size in enumerate(sizes[1:], start=2):
        layer = [builder.add_vertex(f"g{i}.{k}") for k in range(size)]
        for v in layer:
            balanced_tree(builder, layers[-1], root=v, label=f"g{i}.{v}")
        layers.append(layer)
    g = builder.freeze(root=layers[-1][0], leaves=layers[0])
    return BuilderOutput(
        graph=g,
        sharing=ShareScheme.unshared(g),
        leaf_binding={leaf: k for k, leaf in enumerate(layers[0])},
        n_slots=sizes[0],
        name=f"multilayer({sizes})",
    )


# ---------- Attention exnets ----------
def build_attention(n: int, n_layers: int, heads: int = 1, mix_instance: bool = True) -> BuilderOutput:
    """Transformer-like exnet; tokens are expected to carry positional encodings."""
    if n < 2 or n_layers < 2 or heads < 1:
        raise ConfigError(f"Attention exnet needs n >= 2, layers >= 2, heads >= 1 (got {n}, {n_layers}, {heads})")

    builder = GraphBuilder()
    groups = _Groups()
    leaves = [builder.add_vertex(f"x{j}") for j in range(n)]
    q = list(leaves)

    for i in range(1, n_layers):
        tag = f"att{i}"
        if mix_instance:
            q_mix = []
            for j in range(n):
                v = builder.add_vertex(f"q'{i}.{j}")
                builder.set_children(v, q[j], leaves[j])
                groups.vertex[v] = f"{tag}:qmix"
                groups.slot[(v, LEFT)] = f"{tag}-arc:qmix.L"
                groups.slot[(v, RIGHT)] = f"{tag}-arc:qmix.R"
                q_mix.append(v)
        else:
            q_mix = q

        pairs = [[0] * n for _ in range(n)]
        for j in range(n):
            for k in range(n):
                v = builder.add_vertex(f"s{i}.{j}.{k}")
                builder.set_children(v, q_mix[j], q_mix[k])
                groups.vertex[v] = f"{tag}:pair"
                groups.slot[(v, LEFT)] = f"{tag}-arc:pair.L"
                groups.slot[(v, RIGHT)] = f"{tag}-arc:pair.R"
                pairs[j][k] = v

        q_next = []
        for j in range(n):
            target = builder.add_vertex(f"q{i + 1}.{j}")
            if heads == 1:
                record = balanced_tree(builder, pairs[j], root=target, label=f"T{i}.{j}")
                _depthwise(groups, record, f"{tag}.h0", by_side=False)
            else:
                head_roots = []
                for h in range(heads):
                    record = balanced_tree(builder, pairs[j], label=f"T{i}.{j}.{h}")
                    _depthwise(groups, record, f"{tag}.h{h}", by_side=False)
                    head_roots.append(record.root)
                merge = balanced_tree(builder, head_roots, root=target, label=f"M{i}.{j}")
                for tv in merge.internal:
                    groups.vertex[tv.vertex] = f"{tag}.merge:p{tv.index}"
                for ts in merge.slots:
                    groups.slot[(ts.parent, ts.slot)] = f"{tag}.merge-arc:p{ts.parent_index}.{ts.slot}"
            q_next.append(target)
        q = q_next

    final = balanced_tree(builder, q, label="final")
    _depthwise(groups, final, "final", by_side=False)
    g = builder.freeze(root=final.root, leaves=leaves)
    return BuilderOutput(
        graph=g,
        sharing=groups.scheme(g),
        leaf_binding={leaf: j for j, leaf in enumerate(leaves)},
        n_slots=n,
        name=f"attention(n={n},layers={n_layers},heads={heads},mix={mix_instance})",
    )


# ---------- Supernodes ----------
def apply_supernodes(base: BuilderOutput, width: int) -> BuilderOutput:
    """
    Replace every base vertex by `width` vertices. Each member of an internal
    supernode roots its own balanced tree over the members of the two child
    supernodes; a final tree joins the root supernode. Trees inside one
    supernode never share; supernodes whose base vertices shared parameters
    share position by position. Leaf supernodes repeat the base token.
    """
    if width < 1:
        raise ConfigError(f"Supernode width must be >= 1, got {width}")
    bg = base.graph
    builder = GraphBuilder()
    groups = _Groups()
    members: Dict[VertexId, List[VertexId]] = {
        v: [builder.add_vertex(f"{bg.label(v)}.{w}") for w in range(width)] for v in bg.vertices
    }

    for v in up_order(bg):
        if bg.is_leaf(v):
            continue
        left, right = bg.child_vertices(v)
        tree_leaves = members[left] + members[right]
        base_group = base.sharing.vertex_groups[v]
        for w, root in enumerate(members[v]):
            record = balanced_tree(builder, tree_leaves, root=root, label=f"{bg.label(v)}.{w}")
            for tv in record.internal:
                groups.vertex[tv.vertex] = f"sn:{base_group}/w{w}/p{tv.index}"
            for ts in record.slots:
                groups.slot[(ts.parent, ts.slot)] = f"sn-arc:{base_group}/w{w}/p{ts.parent_index}.{ts.slot}"

    top = balanced_tree(builder, members[bg.root], label="snroot")
    leaves = [m for leaf in bg.leaves for m in members[leaf]]
    binding = {m: base.leaf_binding[leaf] for leaf in bg.leaves for m in members[leaf]}
    g = builder.freeze(root=top.root, leaves=leaves)
    return BuilderOutput(
        graph=g,
        sharing=groups.scheme(g),
        leaf_binding=binding,
        n_slots=base.n_slots,
        name=f"supernodes({base.name},W={width})",
        image_size=base.image_size,
    )


# ---------- Random and user-given DAGs ----------
def build_random_exnet(
    n_leaves: int,
    reuse_prob: float = 0.3,
    seed: int = 0,
    max_vertices: Optional[int] = None,
) -> BuilderOutput:
    """
    Random single-rooted exnet. Each new vertex takes one parentless vertex as
    a child and, with probability `reuse_prob`, any existing vertex as the other
    (which may already have parents), so the result is usually a true DAG.
    """
    if n_leaves < 2:
        raise ConfigError(f"A random exnet needs >= 2 leaves, got {n_leaves}")
    limit = max_vertices if max_vertices is not None else 4 * n_leaves
    rng = make_rng(seed)
    builder = GraphBuilder()
    leaves = [builder.add_vertex(f"x{i}") for i in range(n_leaves)]
    pool = list(leaves)
    everything = list(leaves)

    while len(pool) > 1:
        a = pool.pop(int(rng.integers(len(pool))))
        can_reuse = len(everything) + len(pool) < limit
        if can_reuse and rng.random() < reuse_prob:
            candidates = [u for u in everything if u != a]
            b = candidates[int(rng.integers(len(candidates)))]
            if b in pool:
                pool.remove(b)
        else:
            b = pool.pop(int(rng.integers(len(pool))))
        left, right = (a, b) if rng.random() < 0.5 else (b, a)
        z = builder.add_vertex()
        builder.set_children(z, left, right)
        pool.append(z)
        everything.append(z)

    g = builder.freeze(root=pool[0], leaves=leaves)
    return BuilderOutput(
        graph=g,
        sharing=ShareScheme.unshared(g),
        leaf_binding={leaf: i for i, leaf in enumerate(leaves)},
        n_slots=n_leaves,
        name=f"random(n={n_leaves},seed={seed})",
    )


def build_from_dag(
    children: Mapping[Hashable, Sequence[Hashable]], root: Optional[Hashable] = None
) -> BuilderOutput:
    g = normalize_dag(children, root)
    if not g.internal_vertices:
        raise ConfigError("DAG collapses to a single leaf; an exnet needs at least one internal vertex")
    return BuilderOutput(
        graph=g,
        sharing=ShareScheme.unshared(g),
        leaf_binding={leaf: i for i, leaf in enumerate(g.leaves)},
        n_slots=len(g.leaves),
        name="dag",
    )


# ---------- Name-addressed dispatch ----------
BUILDERS: Dict[str, Callable[..., BuilderOutput]] = {
    "sequence_tree": build_sequence_tree,
    "image": build_image_exnet,
    "multilayer": build_multilayer,
    "attention": build_attention,
    "random": build_random_exnet,
    "dag": build_from_dag,
}


def build(name: str, params: Mapping[str, Any], supernode_width: Optional[int] = None) -> BuilderOutput:
    fn = BUILDERS.get(name)
    if fn is None:
        raise ConfigError(f"Unknown builder: {name}")
    try:
        out = fn(**dict(params))
    except TypeError as exc:
        raise ConfigError(f"Bad parameters for builder '{name}': {exc}") from exc
    if supernode_width is not None:
        out = apply_supernodes(out, supernode_width)
    return out


def slot_count(name: str, params: Mapping[str, Any]) -> int:
    """Token slots a builder expects, without building the graph."""
    if name in ("sequence_tree", "attention"):
        return int(params["n"])
    if name == "image":
        return int(params["n"]) ** 2
    if name == "multilayer":
        return int(params["layer_sizes"][0])
    if name == "random":
        return int(params["n_leaves"])
    if name == "dag":
        return build(name, params).n_slots
    raise ConfigError(f"Unknown builder: {name}")
