"""Cross-scale resampling between a parent block and a target block.

A plan squeezes the parent output to ``alpha * C`` channels (C being the
parent's 3x3 width), moves it to the
target resolution (nearest-neighbour upsampling, or one stride-2 3x3 conv
followed by stride-2 max-pools), then projects to the target block's input
width. Two resampled parents are fused by element-wise addition.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import PlanError
from .graph_ir import BackboneGraph, BlockSpec, Edge, as_fraction, scale_width
from .layers import Layer, site

PROJ = "proj_1x1"
UPSAMPLE = "nearest_upsample"
CONV_S2 = "conv3x3_stride2"
DW_CONV_S2 = "dwconv3x3_stride2"
MAXPOOL = "maxpool_stride2"
PROJ_TARGET = "proj_to_target"

SPATIAL_OPS = (UPSAMPLE, CONV_S2, DW_CONV_S2, MAXPOOL)


@dataclass(frozen=True)
class Stage:
    op: str
    in_ch: int
    out_ch: int
    factor: int = 1

    def to_dict(self) -> dict:
        d = {"op": self.op, "in_ch": self.in_ch, "out_ch": self.out_ch}
        if self.op == UPSAMPLE:
            d["factor"] = self.factor
        return d


@dataclass(frozen=True)
class ResamplePlan:
    parent: str
    target: str
    parent_level: int
    target_level: int
    stages: tuple[Stage, ...]

    @property
    def spatial_factor(self) -> Fraction:
        """Net change in resolution across the stages (2 == twice as large)."""
        f = Fraction(1)
        for s in self.stages:
            if s.op == UPSAMPLE:
                f *= s.factor
            elif s.op in (CONV_S2, DW_CONV_S2, MAXPOOL):
                f /= 2
        return f

    def count(self, op: str) -> int:
        return sum(1 for s in self.stages if s.op == op)

    def to_dict(self) -> dict:
        return {
            "parent_level": self.parent_level,
            "target_level": self.target_level,
            "stages": [s.to_dict() for s in self.stages],
        }


def plan_resample(
    parent: BlockSpec,
    target: BlockSpec,
    alpha,
    separable: bool = False,
) -> ResamplePlan:
    alpha = as_fraction(alpha)
    if alpha <= 0:
        raise PlanError(f"alpha must be positive, got {alpha}")
    diff = parent.level - target.level
    stages: list[Stage] = []
    if separable:
        # mobile regime: no leading projection; a stride-2 depthwise conv and the
        # closing 1x1 projection together form the separable conv
        mid = parent.channels
    else:
        mid = scale_width(parent.width, alpha)
        stages.append(Stage(PROJ, parent.channels, mid))
    if diff > 0:
        stages.append(Stage(UPSAMPLE, mid, mid, factor=2**diff))
    elif diff < 0:
        stages.append(Stage(DW_CONV_S2 if separable else CONV_S2, mid, mid))
        stages.extend(Stage(MAXPOOL, mid, mid) for _ in range(-diff - 1))
    stages.append(Stage(PROJ_TARGET, mid, target.channels))
    return ResamplePlan(parent.id, target.id, parent.level, target.level, tuple(stages))


def identity_plan(parent: BlockSpec, target: BlockSpec) -> ResamplePlan:
    return ResamplePlan(parent.id, target.id, parent.level, target.level, ())


def plan_edge(g: BackboneGraph, e: Edge) -> ResamplePlan:
    """Plan for one graph edge.

    Orphan edges whose parent already matches the output block's resolution
    and width are added directly, without resampling.
    """
    p, t = g.block(e.parent), g.block(e.child)
    if e.kind == "orphan" and p.level == t.level and p.channels == t.channels:
        return identity_plan(p, t)
    return plan_resample(p, t, g.alpha, separable=g.separable)


def plan_layers(
    plan: ResamplePlan,
    parent_shape: tuple[int, int, int],
    target_shape: tuple[int, int, int],
) -> list[Layer]:
    """Weighted layers of a plan with their spatial sites.

    Raises PlanError naming the first stage whose input does not line up.
    """
    owner = f"{plan.parent}->{plan.target}"
    h, w, c = parent_shape
    layers: list[Layer] = []
    for i, s in enumerate(plan.stages):
        where = f"stage {i} ({s.op}) of {owner}"
        if s.in_ch != c:
            raise PlanError(f"{where}: expects {s.in_ch} channels, receives {c}")
        if s.op in (PROJ, PROJ_TARGET):
            layers.append(Layer(owner, len(layers), "conv", 1, s.in_ch, s.out_ch, role=s.op, sites=site(h, w)))
        elif s.op == UPSAMPLE:
            if s.factor < 1 or s.factor & (s.factor - 1):
                raise PlanError(f"{where}: upsample factor {s.factor} is not a power of two")
            # nearest resize lands on the target grid (floors at non power-of-two inputs)
            h, w = target_shape[0], target_shape[1]
        elif s.op == CONV_S2:
            h, w = h // 2, w // 2
            layers.append(Layer(owner, len(layers), "conv", 3, s.in_ch, s.out_ch, stride=2, role=s.op, sites=site(h, w)))
        elif s.op == DW_CONV_S2:
            h, w = h // 2, w // 2
            layers.append(Layer(owner, len(layers), "dwconv", 3, s.in_ch, s.in_ch, stride=2, role=s.op, sites=site(h, w)))
        elif s.op == MAXPOOL:
            h, w = h // 2, w // 2
        else:
            raise PlanError(f"{where}: unknown stage")
        if h < 1 or w < 1:
            raise PlanError(f"{where}: spatial size collapses to {h}x{w}")
        c = s.out_ch
    if (h, w, c) != tuple(target_shape):
        raise PlanError(f"{owner}: plan ends at {(h, w, c)}, target expects {tuple(target_shape)}")
    return layers


def resample_cost(plan: ResamplePlan, parent_shape, target_shape) -> tuple[int, int]:
    """(multiply-adds, params); pooling and upsampling are free."""
    layers = plan_layers(plan, parent_shape, target_shape)
    return sum(l.madds for l in layers), sum(l.params for l in layers)


def fuse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise PlanError(f"cannot fuse feature maps of shapes {a.shape} and {b.shape}")
    return a + b
