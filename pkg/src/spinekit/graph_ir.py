"""Block-graph data model for scale-permuted backbones.

A graph is a fixed, scale-decreasing stem followed by a list of permuted
blocks. Every block carries an ``ordering``; edges always run from a lower
ordering to a higher one, so build order is a topological order and cycles
cannot be expressed at all.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Mapping

from .errors import GraphValidationError, ShapeError, SpecLoadError

FORMAT_NAME = "spinekit.architecture"
FORMAT_VERSION = 1

OUTPUT_LEVELS = (3, 4, 5, 6, 7)
PERMUTED_LEVELS = range(2, 8)
STEM_LEVELS = range(1, 6)


def as_fraction(x) -> Fraction:
    """Exact rational from an int, float, str or Fraction (0.65 -> 13/20)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def round_half_up(x) -> int:
    """Nearest integer, ties away from zero for positive values."""
    return math.floor(as_fraction(x) + Fraction(1, 2))


def scale_width(width: int, factor) -> int:
    return max(1, round_half_up(as_fraction(factor) * width))


class BlockKind(str, Enum):
    BOTTLENECK = "bottleneck"
    RESIDUAL = "residual"
    MBCONV = "mbconv"


EXPANSION = {
    BlockKind.BOTTLENECK: 4,
    BlockKind.RESIDUAL: 1,
    BlockKind.MBCONV: 6,
}


@dataclass(frozen=True)
class BlockSpec:
    id: str
    ordering: int
    level: int
    kind: BlockKind
    width: int
    repeat: int = 1
    is_output: bool = False
    is_stem: bool = False

    @property
    def channels(self) -> int:
        """C_in == C_out of the block. Bottlenecks widen 4x; MBConv width is its output."""
        if self.kind is BlockKind.BOTTLENECK:
            return 4 * self.width
        return self.width

    def label(self) -> str:
        return f"L{self.level}/{self.kind.value}/{self.width}"


@dataclass(frozen=True)
class Edge:
    parent: str
    child: str
    kind: str = "connection"  # or "orphan"
    uncertain: bool = False


@dataclass(frozen=True)
class StemConv:
    """Entry layers ahead of the stem blocks."""

    kernel: int = 7
    stride: int = 2
    width: int = 64
    maxpool: bool = True

    @property
    def out_level(self) -> int:
        level = 1 if self.stride == 2 else 0
        return level + (1 if self.maxpool else 0)

    @property
    def out_channels(self) -> int:
        return self.width


NECKS = ("spine", "fpn", "none")


@dataclass(frozen=True)
class BackboneGraph:
    name: str
    stem: tuple[BlockSpec, ...]
    permuted: tuple[BlockSpec, ...] = ()
    edges: tuple[Edge, ...] = ()
    output_dim: int = 256
    stem_conv: StemConv = field(default_factory=StemConv)
    alpha: Fraction = Fraction(1, 2)
    neck: str = "spine"
    separable: bool = False
    head_width: int | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # edges are a set semantically; keep one canonical storage order
        order = {b.id: b.ordering for b in self.stem + self.permuted}
        key = lambda e: (order.get(e.child, -1), order.get(e.parent, -1), e.child, e.parent, e.kind)  # noqa: E731
        object.__setattr__(self, "edges", tuple(sorted(self.edges, key=key)))

    @property
    def blocks(self) -> tuple[BlockSpec, ...]:
        return self.stem + self.permuted

    def block(self, block_id: str) -> BlockSpec:
        return self._index()[block_id]

    def _index(self) -> dict[str, BlockSpec]:
        return {b.id: b for b in self.blocks}

    @property
    def output_blocks(self) -> dict[int, BlockSpec]:
        return {b.level: b for b in self.permuted if b.is_output}

    def parents(self, block_id: str) -> list[Edge]:
        return [e for e in self.edges if e.child == block_id]

    def children(self, block_id: str) -> list[Edge]:
        return [e for e in self.edges if e.parent == block_id]

    def stem_edges(self) -> list[tuple[str, str]]:
        return [(a.id, b.id) for a, b in zip(self.stem, self.stem[1:])]

    def stem_input(self, block: BlockSpec) -> tuple[int, int]:
        """(level, channels) feeding a stem block through the sequential stem."""
        pos = self.stem.index(block)
        if pos == 0:
            return self.stem_conv.out_level, self.stem_conv.out_channels
        prev = self.stem[pos - 1]
        return prev.level, prev.channels

    @property
    def num_blocks(self) -> int:
        """Permuted-block count with repeats expanded."""
        return sum(b.repeat for b in self.permuted)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


def validate_graph(g: BackboneGraph, relaxed: bool = False) -> list[Violation]:
    """Every violated structural invariant; empty iff the graph is valid.

    ``relaxed`` admits the damaged graphs produced by ablations: in-degree 1
    is allowed and intermediate blocks may go unconsumed.
    """
    out: list[Violation] = []
    bad = lambda code, msg: out.append(Violation(code, msg))  # noqa: E731

    ids = Counter(b.id for b in g.blocks)
    for bid, n in ids.items():
        if n > 1:
            bad("duplicate_id", f"block id {bid!r} used {n} times")
    orderings = Counter(b.ordering for b in g.blocks)
    for o, n in orderings.items():
        if n > 1:
            bad("duplicate_ordering", f"ordering {o} used by {n} blocks")
    if g.neck not in NECKS:
        bad("neck", f"unknown neck {g.neck!r}")
    if g.alpha <= 0:
        bad("alpha", f"alpha must be positive, got {g.alpha}")
    if g.output_dim < 1:
        bad("output_dim", f"output_dim must be >= 1, got {g.output_dim}")

    if g.stem and g.permuted:
        last_stem = max(b.ordering for b in g.stem)
        first_perm = min(b.ordering for b in g.permuted)
        if last_stem >= first_perm:
            bad("stem_order", "stem blocks must precede all scale-permuted blocks")
    if list(g.stem) != sorted(g.stem, key=lambda b: b.ordering):
        bad("stem_order", "stem blocks not listed in ordering")
    if not g.stem:
        bad("stem", "graph has no stem blocks")

    level = g.stem_conv.out_level
    for b in g.stem:
        if b.level not in STEM_LEVELS:
            bad("level", f"stem block {b.id} at invalid level L{b.level}")
        if b.level not in (level, level + 1):
            bad("stem_level", f"stem block {b.id} jumps from L{level} to L{b.level}")
        level = b.level
        if b.is_output:
            bad("output_in_stem", f"stem block {b.id} marked as output")
    for b in g.permuted:
        if b.level not in PERMUTED_LEVELS:
            bad("level", f"block {b.id} at invalid level L{b.level}")
    for b in g.blocks:
        if b.width < 1:
            bad("width", f"block {b.id} has width {b.width}")
        if b.repeat < 1:
            bad("repeat", f"block {b.id} has repeat {b.repeat}")

    index = g._index()
    incoming: dict[str, list[Edge]] = defaultdict(list)
    outgoing: dict[str, list[Edge]] = defaultdict(list)
    for e in g.edges:
        p, c = index.get(e.parent), index.get(e.child)
        if p is None or c is None:
            missing = e.parent if p is None else e.child
            bad("unknown_block", f"edge {e.parent}->{e.child} references unknown block {missing!r}")
            continue
        if p.ordering >= c.ordering:
            bad("ordering", f"edge {e.parent}->{e.child} goes from ordering {p.ordering} to {c.ordering}")
        if c.is_stem:
            bad("stem_edge", f"edge {e.parent}->{e.child} targets a stem block")
        incoming[e.child].append(e)
        outgoing[e.parent].append(e)

    for cid, es in incoming.items():
        for pid, n in Counter(e.parent for e in es).items():
            if n > 1:
                bad("duplicate_parent", f"block {cid} takes {pid} as parent {n} times")

    if g.neck == "spine":
        outs = [b for b in g.permuted if b.is_output]
        levels = Counter(b.level for b in outs)
        for lv, n in levels.items():
            if n > 1:
                bad("duplicate_output_level", f"output level L{lv} appears {n} times")
        if set(levels) != set(OUTPUT_LEVELS) or len(outs) != len(OUTPUT_LEVELS):
            got = sorted(b.level for b in outs)
            bad("output_levels", f"output blocks must cover L3..L7 once each, got {got}")
        for b in g.permuted:
            conns = [e for e in incoming.get(b.id, []) if e.kind == "connection"]
            n_in = len(incoming.get(b.id, []))
            if relaxed:
                if n_in < 1:
                    bad("in_degree", f"block {b.id} has no inputs")
            elif len(conns) != 2:
                bad("in_degree", f"block {b.id} has {len(conns)} input connections, expected 2")
            if not relaxed and not b.is_output and not outgoing.get(b.id):
                bad("dangling", f"intermediate block {b.id} has no outgoing edge")
    else:
        if g.permuted:
            bad("neck", f"neck {g.neck!r} does not take scale-permuted blocks")
        if g.edges:
            bad("neck", f"neck {g.neck!r} graphs carry no cross-scale edges")
        if g.neck == "fpn":
            missing = {3, 4, 5} - {b.level for b in g.stem}
            if missing:
                bad("fpn_levels", f"FPN needs stem features at L3..L5, missing {sorted(missing)}")

    # reachability from the stem; stem blocks are reached through the stem chain
    reached = {b.id for b in g.stem}
    for b in sorted(g.permuted, key=lambda b: b.ordering):
        if any(e.parent in reached for e in incoming.get(b.id, [])):
            reached.add(b.id)
    for b in g.permuted:
        if b.id not in reached:
            bad("unreachable", f"block {b.id} is not reachable from the stem")
    return out


def require_valid(g: BackboneGraph, relaxed: bool = False) -> None:
    report = validate_graph(g, relaxed=relaxed)
    if report:
        raise GraphValidationError(report)


def topological_order(g: BackboneGraph, relaxed: bool = False) -> list[str]:
    require_valid(g, relaxed=relaxed)
    return [b.id for b in sorted(g.blocks, key=lambda b: b.ordering)]


def level_resolution(resolution: int, level: int) -> int:
    return resolution // (2**level)


def infer_shapes(g: BackboneGraph, input_resolution: int, relaxed: bool = False) -> dict[str, tuple[int, int, int]]:
    """Output (H, W, C) of every block plus the pyramid entries P3..P7."""
    require_valid(g, relaxed=relaxed)
    if input_resolution < 2 or input_resolution % 2:
        raise ShapeError(f"input resolution must be a positive even number, got {input_resolution}")
    pyramid = OUTPUT_LEVELS if g.neck in ("spine", "fpn") else ()
    used = sorted({b.level for b in g.blocks} | set(pyramid))
    under = [lv for lv in used if level_resolution(input_resolution, lv) < 1]
    if under:
        names = ", ".join(f"L{lv}" for lv in under)
        raise ShapeError(f"input {input_resolution} is too small: level(s) {names} underflow to 0")
    shapes: dict[str, tuple[int, int, int]] = {}
    for b in sorted(g.blocks, key=lambda b: b.ordering):
        r = level_resolution(input_resolution, b.level)
        shapes[b.id] = (r, r, b.channels)
    for lv in pyramid:
        r = level_resolution(input_resolution, lv)
        shapes[f"P{lv}"] = (r, r, g.output_dim)
    return shapes


# --- serialization -------------------------------------------------------

def _block_to_dict(b: BlockSpec) -> dict:
    d = {
        "id": b.id,
        "level": b.level,
        "type": b.kind.value,
        "width": b.width,
        "ordering": b.ordering,
    }
    if not b.is_stem:
        d["is_output"] = b.is_output
    if b.repeat != 1:
        d["repeat"] = b.repeat
    return d


def _alpha_out(a: Fraction):
    f = float(a)
    return f if as_fraction(f) == a else f"{a.numerator}/{a.denominator}"


def graph_to_dict(g: BackboneGraph, plans: Mapping | None = None) -> dict:
    order = {b.id: b.ordering for b in g.blocks}
    edges = []
    for e in sorted(g.edges, key=lambda e: (order.get(e.child, 0), order.get(e.parent, 0), e.kind)):
        rec: list = [e.parent, e.child]
        attrs = {}
        if e.kind != "connection":
            attrs["kind"] = e.kind
        if e.uncertain:
            attrs["uncertain"] = True
        if plans is not None and (e.parent, e.child) in plans:
            attrs["resample"] = plans[(e.parent, e.child)]
        if attrs:
            rec.append(attrs)
        edges.append(rec)
    sc = g.stem_conv
    stem_conv = {"kernel": sc.kernel, "stride": sc.stride, "width": sc.width, "maxpool": sc.maxpool}
    d = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": g.name,
        "alpha": _alpha_out(g.alpha),
        "output_dim": g.output_dim,
        "neck": g.neck,
        "separable": g.separable,
        "stem_conv": stem_conv,
        "stem": [_block_to_dict(b) for b in sorted(g.stem, key=lambda b: b.ordering)],
        "blocks": [_block_to_dict(b) for b in sorted(g.permuted, key=lambda b: b.ordering)],
        "edges": edges,
    }
    if g.head_width is not None:
        d["head_width"] = g.head_width
    if g.metadata:
        d["metadata"] = dict(g.metadata)
    return d


def graph_to_json(g: BackboneGraph, plans: Mapping | None = None) -> str:
    return json.dumps(graph_to_dict(g, plans), sort_keys=True, indent=2) + "\n"


def _block_from_dict(d: Mapping, stem: bool) -> BlockSpec:
    try:
        return BlockSpec(
            id=str(d["id"]),
            ordering=int(d["ordering"]),
            level=int(d["level"]),
            kind=BlockKind(d["type"]),
            width=int(d["width"]),
            repeat=int(d.get("repeat", 1)),
            is_output=bool(d.get("is_output", False)),
            is_stem=stem,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SpecLoadError(f"bad block record {dict(d)!r}: {exc}") from exc


def graph_from_dict(d: Mapping, source: str = "<dict>") -> BackboneGraph:
    if d.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise SpecLoadError(f"{source}: unexpected format {d.get('format')!r}")
    if int(d.get("version", FORMAT_VERSION)) > FORMAT_VERSION:
        raise SpecLoadError(f"{source}: unsupported version {d.get('version')}")
    try:
        edges = []
        for rec in d.get("edges", []):
            attrs = rec[2] if len(rec) > 2 else {}
            edges.append(Edge(str(rec[0]), str(rec[1]), attrs.get("kind", "connection"), bool(attrs.get("uncertain", False))))
        sc = d.get("stem_conv", {})
        stem_conv = StemConv(
            kernel=int(sc.get("kernel", 7)),
            stride=int(sc.get("stride", 2)),
            width=int(sc.get("width", 64)),
            maxpool=bool(sc.get("maxpool", True)),
        )
        return BackboneGraph(
            name=str(d.get("name", "unnamed")),
            stem=tuple(_block_from_dict(b, True) for b in d["stem"]),
            permuted=tuple(_block_from_dict(b, False) for b in d.get("blocks", [])),
            edges=tuple(edges),
            output_dim=int(d.get("output_dim", 256)),
            stem_conv=stem_conv,
            alpha=as_fraction(d.get("alpha", 0.5)),
            neck=str(d.get("neck", "spine")),
            separable=bool(d.get("separable", False)),
            head_width=d.get("head_width"),
            metadata=dict(d.get("metadata", {})),
        )
    except SpecLoadError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise SpecLoadError(f"{source}: malformed architecture document ({exc!r})") from exc


def graph_from_json(text: str, source: str = "<json>") -> BackboneGraph:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecLoadError(f"{source}: not valid JSON ({exc})") from exc
    return graph_from_dict(d, source)


_DOT_SHAPES = {BlockKind.BOTTLENECK: "box", BlockKind.RESIDUAL: "diamond", BlockKind.MBCONV: "ellipse"}


def to_dot(g: BackboneGraph) -> str:
    """Graphviz source: one node per block, solid edges for connections."""
    lines = [f'digraph "{g.name}" {{', "  rankdir=BT;"]
    for b in sorted(g.blocks, key=lambda b: b.ordering):
        attrs = [f'label="{b.label()}"', f"shape={_DOT_SHAPES[b.kind]}"]
        if b.is_output:
            attrs.append("color=red")
        if b.is_stem:
            attrs.append("style=filled, fillcolor=lightgrey")
        lines.append(f'  "{b.id}" [{", ".join(attrs)}];')
    for a, b in g.stem_edges():
        lines.append(f'  "{a}" -> "{b}" [style=dashed];')
    for e in g.edges:
        style = "solid, penwidth=2" if e.kind == "orphan" else "solid"
        lines.append(f'  "{e.parent}" -> "{e.child}" [style="{style}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def with_blocks(g: BackboneGraph, blocks: Iterable[BlockSpec], **changes) -> BackboneGraph:
    """Copy of ``g`` with blocks (stem or permuted) replaced by id."""
    new = {b.id: b for b in blocks}
    stem = tuple(new.get(b.id, b) for b in g.stem)
    permuted = tuple(new.get(b.id, b) for b in g.permuted)
    return replace(g, stem=stem, permuted=permuted, **changes)
