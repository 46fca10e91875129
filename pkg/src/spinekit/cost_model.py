"""Multiply-add and parameter accounting.

Costs are computed from a flat layer inventory (``model_layers``): every
conv, depthwise conv and fully-connected layer of a model, with the spatial
sites where its weights are applied. Only those layers cost multiply-adds;
normalization, activations, pooling, upsampling and additions are free.
Parameters are weights plus 2 per channel for each normalization layer, and
biases on prediction layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError
from .graph_ir import EXPANSION, OUTPUT_LEVELS, BackboneGraph, BlockKind, BlockSpec, as_fraction, infer_shapes, level_resolution
from .layers import Layer, site
from .model_zoo import HeadConfig, ModelWithHead
from .resampling import plan_edge, plan_layers


@dataclass(frozen=True)
class CostConventions:
    # "when_needed": 1x1 projection shortcut only on width/stride change;
    # "first_copy": the first copy of every residual/bottleneck block has one
    shortcut: str = "when_needed"
    # squeeze width of MBConv SE modules, as a fraction of the block width
    se_ratio: Fraction = Fraction(1, 5)

    def __post_init__(self):
        if self.shortcut not in ("first_copy", "when_needed"):
            raise ConfigError(f"unknown shortcut convention {self.shortcut!r}")


DEFAULT_CONVENTIONS = CostConventions()


# --- block inventories ---------------------------------------------------

def _copy_layers(owner, start, kind, width, cin, cout, stride, r_in, r_out, first, conv):
    """Layers of one block copy, in execution order."""
    out: list[Layer] = []

    def add(op, k, ci, co, res, s=1, role="", bias=False, norm=True):
        out.append(Layer(owner, start + len(out), op, k, ci, co, stride=s, bias=bias, norm=norm, role=role, sites=site(res)))

    if kind is BlockKind.BOTTLENECK:
        add("conv", 1, cin, width, r_in, role="conv1")
        add("conv", 3, width, width, r_out, stride, role="conv2")
        add("conv", 1, width, cout, r_out, role="conv3")
    elif kind is BlockKind.RESIDUAL:
        add("conv", 3, cin, width, r_out, stride, role="conv1")
        add("conv", 3, width, cout, r_out, role="conv2")
    elif kind is BlockKind.MBCONV:
        # expansion and squeeze sizes follow the block's own width, not its input
        expanded = width * EXPANSION[kind]
        add("conv", 1, cin, expanded, r_in, role="expand")
        add("dwconv", 3, expanded, expanded, r_out, stride, role="depthwise")
        se = max(1, int(width * conv.se_ratio))
        add("fc", 1, expanded, se, 1, role="se_reduce", bias=True, norm=False)
        add("fc", 1, se, expanded, 1, role="se_expand", bias=True, norm=False)
        add("conv", 1, expanded, cout, r_out, role="project")
        return out
    else:
        raise ConfigError(f"unknown block type {kind!r}")
    needs = cin != cout or stride != 1
    if needs or (first and conv.shortcut == "first_copy"):
        add("conv", 1, cin, cout, r_out, stride, role="shortcut")
    return out


def block_layers(
    b: BlockSpec,
    in_channels: int,
    in_level: int,
    resolution: int,
    conv: CostConventions = DEFAULT_CONVENTIONS,
) -> list[Layer]:
    """Every layer of a block's repeat chain; input may come from a lower level."""
    if b.width < 1:
        raise ConfigError(f"block {b.id} has width {b.width}")
    if b.level - in_level not in (0, 1):
        raise ConfigError(f"block {b.id} cannot take input from L{in_level}")
    r_in = level_resolution(resolution, in_level)
    r_out = level_resolution(resolution, b.level)
    layers: list[Layer] = []
    cin, stride, r = in_channels, 2 ** (b.level - in_level), r_in
    for copy in range(b.repeat):
        layers += _copy_layers(b.id, len(layers), b.kind, b.width, cin, b.channels, stride, r, r_out, copy == 0, conv)
        cin, stride, r = b.channels, 1, r_out
    return layers


def count_block(b: BlockSpec, shape, in_channels: int | None = None, conv: CostConventions = DEFAULT_CONVENTIONS) -> tuple[int, int]:
    """(madds, params) of a block whose input already has its level and width."""
    h = shape[0]
    if in_channels is None:
        in_channels = b.channels
    # any resolution whose level maps to h works; use h * 2^level
    layers = block_layers(b, in_channels, b.level, h * 2**b.level, conv)
    return sum(l.madds for l in layers), sum(l.params for l in layers)


# --- whole-model inventory ----------------------------------------------

def _conv3(owner, idx, cin, cout, sites, separable, role, stride=1, bias=False, norm=True):
    if separable:
        return [
            Layer(owner, idx, "dwconv", 3, cin, cin, stride=stride, norm=False, role=role + ".depthwise", sites=sites),
            Layer(owner, idx + 1, "conv", 1, cin, cout, bias=bias, norm=norm, role=role + ".pointwise", sites=sites),
        ]
    return [Layer(owner, idx, "conv", 3, cin, cout, stride=stride, bias=bias, norm=norm, role=role, sites=sites)]


def stem_layers(g: BackboneGraph, resolution: int) -> list[Layer]:
    sc = g.stem_conv
    r = level_resolution(resolution, 1 if sc.stride == 2 else 0)
    return [Layer("stem", 0, "conv", sc.kernel, 3, sc.width, stride=sc.stride, role="entry_conv", sites=site(r))]


def endpoint_layers(g: BackboneGraph, resolution: int) -> list[Layer]:
    if g.neck != "spine":
        return []
    out = []
    for lv, b in sorted(g.output_blocks.items()):
        r = level_resolution(resolution, lv)
        out.append(Layer(f"P{lv}", 0, "conv", 1, b.channels, g.output_dim, role="endpoint", sites=site(r)))
    return out


def fpn_layers(g: BackboneGraph, resolution: int) -> list[Layer]:
    if g.neck != "fpn":
        return []
    last = {}
    for b in g.stem:
        last[b.level] = b
    d = g.output_dim
    out: list[Layer] = []
    for lv in (3, 4, 5):
        r = level_resolution(resolution, lv)
        out.append(Layer("fpn", len(out), "conv", 1, last[lv].channels, d, bias=True, norm=False, role=f"lateral{lv}", sites=site(r)))
    for lv in (3, 4, 5):
        r = level_resolution(resolution, lv)
        out.append(Layer("fpn", len(out), "conv", 3, d, d, bias=True, norm=False, role=f"output{lv}", sites=site(r)))
    for lv in (6, 7):
        r = level_resolution(resolution, lv)
        out.append(Layer("fpn", len(out), "conv", 3, d, d, stride=2, bias=True, norm=False, role=f"output{lv}", sites=site(r)))
    return out


def pyramid_sites(resolution: int, count: int = 1):
    return tuple((level_resolution(resolution, lv), level_resolution(resolution, lv), count) for lv in OUTPUT_LEVELS)


def head_layers(m: ModelWithHead, resolution: int) -> list[Layer]:
    h, g = m.head, m.graph
    if h is None:
        return []
    out: list[Layer] = []

    def extend(new):
        out.extend(new)

    if h.kind == "retinanet":
        sites = pyramid_sites(resolution)
        for tower, n_pred in (("class", h.anchors_per_location * h.num_classes), ("box", 4 * h.anchors_per_location)):
            cin = g.output_dim
            for i in range(h.shared_conv_layers):
                extend(_conv3("head", len(out), cin, h.head_width, sites, h.separable, f"{tower}_conv{i}"))
                cin = h.head_width
            extend(_conv3("head", len(out), cin, n_pred, sites, h.separable, f"{tower}_predict", bias=True, norm=False))
    elif h.kind == "maskrcnn":
        sites = pyramid_sites(resolution)
        extend(_conv3("head", len(out), g.output_dim, h.rpn_width, sites, False, "rpn_conv", bias=True, norm=False))
        extend([Layer("head", len(out), "conv", 1, h.rpn_width, h.rpn_anchors, bias=True, norm=False, role="rpn_score", sites=sites)])
        extend([Layer("head", len(out), "conv", 1, h.rpn_width, 4 * h.rpn_anchors, bias=True, norm=False, role="rpn_box", sites=sites)])
        roi = site(h.roi_size, count=h.proposals)
        cin = g.output_dim
        for i in range(h.shared_conv_layers):
            extend(_conv3("head", len(out), cin, h.head_width, roi, False, f"det_conv{i}"))
            cin = h.head_width
        flat = cin * h.roi_size * h.roi_size
        fc_sites = site(1, count=h.proposals)
        extend([Layer("head", len(out), "fc", 1, flat, h.fc_units, role="det_fc", sites=fc_sites)])
        k = h.num_classes
        extend([Layer("head", len(out), "fc", 1, h.fc_units, k, bias=True, norm=False, role="det_score", sites=fc_sites)])
        extend([Layer("head", len(out), "fc", 1, h.fc_units, 4 * k, bias=True, norm=False, role="det_box", sites=fc_sites)])
        mroi = site(h.mask_roi_size, count=h.mask_rois)
        cin = g.output_dim
        for i in range(h.mask_conv_layers):
            extend(_conv3("head", len(out), cin, h.mask_width, mroi, False, f"mask_conv{i}"))
            cin = h.mask_width
        extend([Layer("head", len(out), "deconv", 2, cin, h.mask_width, stride=2, role="mask_upsample", sites=mroi)])
        up = site(2 * h.mask_roi_size, count=h.mask_rois)
        extend([Layer("head", len(out), "conv", 1, h.mask_width, h.num_classes, bias=True, norm=False, role="mask_predict", sites=up)])
    elif h.kind == "classifier":
        feat = g.output_dim if g.neck != "none" else g.stem[-1].channels
        extend([Layer("head", 0, "fc", 1, feat, h.num_classes, bias=True, norm=False, role="classifier", sites=site(1))])
    return out


def model_layers(m: ModelWithHead, resolution: int, conv: CostConventions = DEFAULT_CONVENTIONS) -> list[Layer]:
    """Flat inventory of every weighted layer, grouped by owner in build order."""
    g = m.graph
    shapes = infer_shapes(g, resolution, relaxed=True)
    layers = stem_layers(g, resolution)
    for b in sorted(g.blocks, key=lambda b: b.ordering):
        if b.is_stem:
            in_level, in_ch = g.stem_input(b)
        else:
            in_level, in_ch = b.level, b.channels
        layers += block_layers(b, in_ch, in_level, resolution, conv)
    for e in g.edges:
        plan = plan_edge(g, e)
        layers += plan_layers(plan, shapes[e.parent], shapes[e.child])
    layers += endpoint_layers(g, resolution)
    layers += fpn_layers(g, resolution)
    layers += head_layers(m, resolution)
    return layers


def _section(layer: Layer, block_ids) -> str:
    if layer.owner in block_ids:
        return "block"
    if "->" in layer.owner:
        return "resample"
    if layer.owner == "stem":
        return "stem"
    if layer.owner.startswith("P"):
        return "endpoint"
    if layer.owner == "fpn":
        return "neck"
    return "head"


@dataclass(frozen=True)
class CostReport:
    name: str
    resolution: int
    per_block: dict[str, tuple[int, int]]
    stem_total: tuple[int, int]
    resample_total: tuple[int, int]
    endpoint_total: tuple[int, int]
    neck_total: tuple[int, int]
    head_total: tuple[int, int]
    grand_total: tuple[int, int]
    head_kind: str | None = None
    layer_count: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def madds(self) -> int:
        return self.grand_total[0]

    @property
    def params(self) -> int:
        return self.grand_total[1]

    def component_sum(self) -> tuple[int, int]:
        parts = [self.stem_total, self.resample_total, self.endpoint_total, self.neck_total, self.head_total]
        parts += list(self.per_block.values())
        return sum(p[0] for p in parts), sum(p[1] for p in parts)

    def to_dict(self) -> dict:
        pair = lambda p: {"madds": p[0], "params": p[1]}  # noqa: E731
        return {
            "name": self.name,
            "resolution": self.resolution,
            "head": self.head_kind,
            "per_block": {k: pair(v) for k, v in self.per_block.items()},
            "stem_total": pair(self.stem_total),
            "resample_total": pair(self.resample_total),
            "endpoint_total": pair(self.endpoint_total),
            "neck_total": pair(self.neck_total),
            "head_total": pair(self.head_total),
            "grand_total": pair(self.grand_total),
        }


def count_model(m: ModelWithHead, resolution: int, conv: CostConventions = DEFAULT_CONVENTIONS) -> CostReport:
    layers = model_layers(m, resolution, conv)
    block_ids = {b.id for b in m.graph.blocks}
    per_block = {b.id: [0, 0] for b in sorted(m.graph.blocks, key=lambda b: b.ordering)}
    totals = {k: [0, 0] for k in ("stem", "resample", "endpoint", "neck", "head")}
    for l in layers:
        sec = _section(l, block_ids)
        acc = per_block[l.owner] if sec == "block" else totals[sec]
        acc[0] += l.madds
        acc[1] += l.params
    grand = (sum(l.madds for l in layers), sum(l.params for l in layers))
    return CostReport(
        name=m.name,
        resolution=resolution,
        per_block={k: tuple(v) for k, v in per_block.items()},
        stem_total=tuple(totals["stem"]),
        resample_total=tuple(totals["resample"]),
        endpoint_total=tuple(totals["endpoint"]),
        neck_total=tuple(totals["neck"]),
        head_total=tuple(totals["head"]),
        grand_total=grand,
        head_kind=m.head.kind if m.head else None,
        layer_count=len(layers),
    )


def compare_models(reports: list[CostReport]) -> list[dict]:
    """Totals and ratios against the first report."""
    if not reports:
        return []
    base = reports[0]
    rows = []
    for r in reports:
        rows.append(
            {
                "name": r.name,
                "resolution": r.resolution,
                "madds": r.madds,
                "params": r.params,
                "madds_ratio": r.madds / base.madds if base.madds else float("nan"),
                "params_ratio": r.params / base.params if base.params else float("nan"),
            }
        )
    return rows


def render_table(rows: list[dict]) -> str:
    header = f"{'model':<18} {'res':>5} {'FLOPs(B)':>10} {'Params(M)':>10} {'FLOPs x':>8} {'Params x':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['name']:<18} {r['resolution']:>5} {r['madds'] / 1e9:>10.2f} {r['params'] / 1e6:>10.2f}"
            f" {r['madds_ratio']:>8.3f} {r['params_ratio']:>8.3f}"
        )
    return "\n".join(lines)


def render_json(rows: list[dict]) -> str:
    return json.dumps(rows, sort_keys=True, indent=2)


def conventions_from(shortcut: str | None = None, se_ratio=None) -> CostConventions:
    kw = {}
    if shortcut is not None:
        kw["shortcut"] = shortcut
    if se_ratio is not None:
        kw["se_ratio"] = as_fraction(se_ratio)
    return CostConventions(**kw)
