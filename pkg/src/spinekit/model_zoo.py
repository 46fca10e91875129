"""Named architectures built from the spec files under ``models/``.

Topologies are data, never code: SpineNet-49 and the permuted-ResNet family
are full architecture documents, while the scaled, mobile and ResNet
variants are short recipes (``spinekit.variant`` documents) resolved here.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, SpecLoadError
from .graph_ir import (
    BackboneGraph,
    BlockKind,
    BlockSpec,
    StemConv,
    as_fraction,
    graph_from_dict,
    require_valid,
    scale_width,
    OUTPUT_LEVELS,
)

VARIANT_FORMAT = "spinekit.variant"
PACKAGE_MODEL_DIR = Path(__file__).with_name("models")


class VariantId(str, Enum):
    SPINENET49S = "spinenet49s"
    SPINENET49 = "spinenet49"
    SPINENET96 = "spinenet96"
    SPINENET143 = "spinenet143"
    SPINENET190 = "spinenet190"
    R35SP18 = "r35sp18"
    R23SP30 = "r23sp30"
    R14SP39 = "r14sp39"
    R0SP53 = "r0sp53"
    RESNET50FPN = "resnet50fpn"
    RESNET101FPN = "resnet101fpn"
    RESNET152FPN = "resnet152fpn"
    SPINENET49XS_MB = "spinenet49xs_mb"
    SPINENET49S_MB = "spinenet49s_mb"
    SPINENET49_MB = "spinenet49_mb"
    # plain classification trunks, the baselines of the classification table
    RESNET50 = "resnet50"
    RESNET101 = "resnet101"
    RESNET152 = "resnet152"


MOBILE_VARIANTS = (VariantId.SPINENET49XS_MB, VariantId.SPINENET49S_MB, VariantId.SPINENET49_MB)
HEAD_KINDS = ("retinanet", "maskrcnn", "classifier")


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    shared_conv_layers: int = 4
    head_width: int = 256
    # COCO label space of the reference detection code (90 ids + background)
    num_classes: int = 91
    anchors_per_location: int = 9
    # two-stage (Mask R-CNN) settings
    proposals: int = 1000
    mask_rois: int = 100
    roi_size: int = 7
    mask_roi_size: int = 14
    fc_units: int = 1024
    rpn_width: int = 256
    rpn_anchors: int = 3
    mask_conv_layers: int = 4
    mask_width: int = 256
    separable: bool = False

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.shared_conv_layers < 0:
            raise ConfigError("shared_conv_layers must be >= 0")
        if self.head_width <= 0:
            raise ConfigError("head_width must be > 0")
        if self.num_classes <= 0:
            raise ConfigError("num_classes must be > 0")


@dataclass(frozen=True)
class ModelWithHead:
    graph: BackboneGraph
    head: HeadConfig | None = None

    @property
    def name(self) -> str:
        return self.graph.name


@dataclass(frozen=True)
class ZooEntry:
    graph: BackboneGraph
    heads: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    resolution: Mapping[str, int] = field(default_factory=dict)


def model_dir() -> Path:
    env = os.environ.get("SPINE_MODEL_DIR")
    return Path(env) if env else PACKAGE_MODEL_DIR


def _read(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise SpecLoadError(f"{path}: spec file not found") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecLoadError(f"{path}: cannot read spec file ({exc})") from exc


def resolve_variant(name) -> VariantId:
    try:
        return VariantId(str(getattr(name, "value", name)).lower())
    except ValueError as exc:
        raise ConfigError(f"unknown model {name!r}; choose from {[v.value for v in VariantId]}") from exc


def load_entry(name, directory: Path | None = None) -> ZooEntry:
    """Resolve a zoo name (or a path to a spec file) into a validated graph."""
    if isinstance(name, Path) or (isinstance(name, str) and name.endswith(".json")):
        path = Path(name)
        return _entry_from_doc(_read(path), path, path.parent)
    v = resolve_variant(name)
    directory = directory or model_dir()
    path = directory / f"{v.value}.json"
    return _load_cached(str(path), str(directory))


@lru_cache(maxsize=None)
def _load_cached(path: str, directory: str) -> ZooEntry:
    return _entry_from_doc(_read(Path(path)), Path(path), Path(directory))


def _entry_from_doc(doc: dict, path: Path, directory: Path) -> ZooEntry:
    heads = doc.get("heads", {})
    resolution = doc.get("resolution", {})
    if doc.get("format") == VARIANT_FORMAT:
        g = _build_recipe(doc, path, directory)
    else:
        g = graph_from_dict(doc, str(path))
    _require_loadable(g, path)
    if doc.get("format") == VARIANT_FORMAT and "base" in doc:
        base = load_entry(doc["base"], directory)
        heads = {**base.heads, **heads}
        resolution = {**base.resolution, **resolution}
    return ZooEntry(g, heads, resolution)


def _require_loadable(g: BackboneGraph, path: Path) -> None:
    try:
        require_valid(g)
    except Exception as exc:
        raise SpecLoadError(f"{path}: {exc}") from exc


def _build_recipe(doc: dict, path: Path, directory: Path) -> BackboneGraph:
    name = doc.get("name", path.stem)
    try:
        if "resnet" in doc:
            r = doc["resnet"]
            g = resnet_graph(name, r["stages"], r.get("widths", (64, 128, 256, 512)), neck=doc.get("neck", "fpn"))
        elif "base" in doc:
            base = load_entry(doc["base"], directory).graph
            if "mobile" in doc:
                m = doc["mobile"]
                g = mobilize(
                    base,
                    {int(k): int(v) for k, v in m["level_widths"].items()},
                    width_factor=m.get("width_factor", 1.0),
                    stem_width=m.get("stem_width", 8),
                )
            else:
                g = base
            if "scale" in doc:
                s = doc["scale"]
                g = scale_variant(g, s.get("repeat", 1), s.get("width_factor", 1.0), s.get("alpha", g.alpha))
        else:
            raise SpecLoadError(f"{path}: variant document needs 'base' or 'resnet'")
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecLoadError(f"{path}: malformed variant document ({exc!r})") from exc
    changes = {"name": name}
    if "output_dim" in doc:
        changes["output_dim"] = int(doc["output_dim"])
    if "head_width" in doc:
        changes["head_width"] = int(doc["head_width"])
    return replace(g, **changes)


def build_variant(v) -> BackboneGraph:
    return load_entry(v).graph


def build_mobile_variant(v) -> BackboneGraph:
    v = resolve_variant(v)
    if v not in MOBILE_VARIANTS:
        raise ConfigError(f"{v.value} is not a mobile (MBConv) variant")
    return build_variant(v)


def resnet_graph(name: str, stages, widths=(64, 128, 256, 512), neck: str = "fpn") -> BackboneGraph:
    """Scale-decreased ResNet trunk; every block lives in the stem."""
    stem = []
    for level, (n, w) in enumerate(zip(stages, widths), start=2):
        for j in range(n):
            stem.append(BlockSpec(f"c{level}_{j}", len(stem), level, BlockKind.BOTTLENECK, int(w), is_stem=True))
    return BackboneGraph(name=name, stem=tuple(stem), neck=neck)


def scale_variant(base: BackboneGraph, repeat: int, width_factor, alpha=None) -> BackboneGraph:
    """Block repeat plus uniform width scaling.

    Each block becomes a sequential chain of ``repeat`` copies; the first copy
    takes the block's inputs and the last one feeds its consumers, so edges
    are untouched and the chain is carried by ``BlockSpec.repeat``.
    """
    if repeat < 1:
        raise ConfigError(f"repeat must be >= 1, got {repeat}")
    factor = as_fraction(width_factor)
    if factor <= 0:
        raise ConfigError(f"width_factor must be > 0, got {width_factor}")

    def scaled(b: BlockSpec) -> BlockSpec:
        return replace(b, width=scale_width(b.width, factor), repeat=b.repeat * repeat)

    sc = base.stem_conv
    return replace(
        base,
        stem=tuple(scaled(b) for b in base.stem),
        permuted=tuple(scaled(b) for b in base.permuted),
        stem_conv=replace(sc, width=scale_width(sc.width, factor)),
        alpha=base.alpha if alpha is None else as_fraction(alpha),
    )


def mobilize(base: BackboneGraph, level_widths: Mapping[int, int], width_factor=1.0, stem_width: int = 8) -> BackboneGraph:
    """MBConv version of ``base``.

    The 7x7 conv + max-pool entry becomes a stride-2 3x3 conv, the first stem
    block becomes an L1 MBConv block and the next one a stride-2 L2 block.
    """
    factor = as_fraction(width_factor)
    if len(base.stem) < 2:
        raise ConfigError("mobile conversion needs at least two stem blocks")

    def mb(b: BlockSpec, level: int) -> BlockSpec:
        return replace(b, level=level, kind=BlockKind.MBCONV, width=scale_width(level_widths[level], factor))

    stem = (mb(base.stem[0], 1),) + tuple(mb(b, b.level) for b in base.stem[1:])
    return replace(
        base,
        stem=stem,
        permuted=tuple(mb(b, b.level) for b in base.permuted),
        stem_conv=StemConv(kernel=3, stride=2, width=scale_width(stem_width, factor), maxpool=False),
        separable=True,
    )


def default_head(v, kind: str, **overrides) -> HeadConfig:
    entry = load_entry(v)
    return head_for(entry, kind, **overrides)


def head_for(entry: ZooEntry, kind: str, **overrides) -> HeadConfig:
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {kind!r}")
    params: dict[str, Any] = {"separable": entry.graph.separable}
    if entry.graph.head_width:
        params["head_width"] = entry.graph.head_width
    params.update(entry.heads.get(kind, {}))
    params.update(overrides)
    known = {f.name for f in fields(HeadConfig)}
    unknown = set(params) - known
    if unknown:
        raise ConfigError(f"unknown head settings {sorted(unknown)}")
    return HeadConfig(kind=kind, **{k: v for k, v in params.items() if k != "kind"})


def default_resolution(v, kind: str) -> int | None:
    return load_entry(v).resolution.get(kind)


def attach_head(g: BackboneGraph, h: HeadConfig) -> ModelWithHead:
    require_valid(g)
    if g.neck == "none":
        if h.kind != "classifier":
            raise ConfigError(f"{h.kind} heads need a feature pyramid; {g.name} has none")
    elif g.neck == "spine" and h.kind == "classifier":
        missing = set(OUTPUT_LEVELS) - set(g.output_blocks)
        if missing:
            raise ConfigError(f"classifier needs P3..P7; {g.name} lacks {sorted(missing)}")
    return ModelWithHead(g, h)


def build_model(name, head_kind: str | None = None, **head_overrides) -> ModelWithHead:
    entry = load_entry(name)
    if head_kind is None:
        return ModelWithHead(entry.graph, None)
    return attach_head(entry.graph, head_for(entry, head_kind, **head_overrides))


def parse_override(text: str) -> tuple[str, Any]:
    """'head.num_classes=91' -> ('num_classes', 91)."""
    key, sep, value = text.partition("=")
    if not sep or not key.startswith("head."):
        raise ConfigError(f"override must look like head.<field>=<value>, got {text!r}")
    field_name = key[len("head."):]
    try:
        parsed: Any = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return field_name, parsed
