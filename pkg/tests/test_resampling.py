from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinekit.errors import PlanError
from spinekit.graph_ir import BlockKind, BlockSpec, infer_shapes
from spinekit.model_zoo import VariantId, build_variant
from spinekit.resampling import (
    CONV_S2,
    DW_CONV_S2,
    MAXPOOL,
    PROJ,
    PROJ_TARGET,
    UPSAMPLE,
    Stage,
    ResamplePlan,
    fuse,
    identity_plan,
    plan_edge,
    plan_layers,
    plan_resample,
    resample_cost,
)

ZOO = [v.value for v in VariantId]


def block(level, kind="bottleneck", width=None, bid="x", ordering=0):
    width = width or {2: 64, 3: 128}.get(level, 256)
    return BlockSpec(bid, ordering, level, BlockKind(kind), width)


def ops(plan):
    return [(s.op, s.in_ch, s.out_ch) for s in plan.stages]


def test_upsample_plan_l5_bottleneck_to_l3_residual():
    p = plan_resample(block(5), block(3, "residual", 128), Fraction(1, 2))
    # the squeeze follows the parent's 3x3 width: 0.5 * 256
    assert ops(p) == [(PROJ, 1024, 128), (UPSAMPLE, 128, 128), (PROJ_TARGET, 128, 128)]
    assert p.stages[1].factor == 4
    assert p.spatial_factor == 4


def test_downsample_plan_l3_to_l5():
    p = plan_resample(block(3), block(5), 0.5)
    assert ops(p) == [(PROJ, 512, 64), (CONV_S2, 64, 64), (MAXPOOL, 64, 64), (PROJ_TARGET, 64, 1024)]
    assert p.spatial_factor == Fraction(1, 4)


def test_same_level_alpha_one():
    p = plan_resample(block(4), block(4), 1)
    assert ops(p) == [(PROJ, 1024, 256), (PROJ_TARGET, 256, 1024)]


def test_separable_plan_has_no_leading_projection():
    mb = lambda lv, w: BlockSpec("m", 0, lv, BlockKind.MBCONV, w)  # noqa: E731
    p = plan_resample(mb(3, 40), mb(6, 112), 0.5, separable=True)
    assert [s.op for s in p.stages] == [DW_CONV_S2, MAXPOOL, MAXPOOL, PROJ_TARGET]
    assert p.count(CONV_S2) == 0


@pytest.mark.parametrize("alpha", [0, -0.5])
def test_alpha_must_be_positive(alpha):
    with pytest.raises(PlanError):
        plan_resample(block(3), block(4), alpha)


@given(st.integers(2, 7), st.integers(2, 7), st.sampled_from(["bottleneck", "residual"]), st.sampled_from([0.25, 0.5, 1.0]))
def test_plan_structure(pl, tl, kind, alpha):
    p = plan_resample(block(pl, kind), block(tl), alpha)
    assert p.spatial_factor == Fraction(2) ** (pl - tl)
    assert p.stages[-1].out_ch == block(tl).channels
    if pl < tl:
        assert p.count(CONV_S2) == 1 and p.count(MAXPOOL) == tl - pl - 1
    else:
        assert p.count(CONV_S2) == 0 and p.count(MAXPOOL) == 0
    for a, b in zip(p.stages, p.stages[1:]):
        assert a.out_ch == b.in_ch


@pytest.mark.parametrize("name", ZOO)
def test_zoo_edges_hit_exact_spatial_factor(name):
    g = build_variant(name)
    shapes = infer_shapes(g, 256)
    for e in g.edges:
        p = plan_edge(g, e)
        pl, tl = g.block(e.parent).level, g.block(e.child).level
        assert p.spatial_factor == Fraction(2) ** (pl - tl)
        plan_layers(p, shapes[e.parent], shapes[e.child])
        if g.separable:
            assert all(s.op != CONV_S2 for s in p.stages)


def test_orphan_edge_is_identity_when_shapes_match(sn49):
    orphan = next(e for e in sn49.edges if e.kind == "orphan")
    p = plan_edge(sn49, orphan)
    assert p.stages == ()
    assert resample_cost(p, (20, 20, 1024), (20, 20, 1024)) == (0, 0)


def test_single_projection_cost():
    p = ResamplePlan("a", "b", 3, 3, (Stage(PROJ, 64, 128),))
    madds, params = resample_cost(p, (80, 80, 64), (80, 80, 128))
    assert madds == 80 * 80 * 64 * 128 == 52_428_800
    assert params == 64 * 128 + 2 * 128


def test_empty_plan_costs_nothing():
    assert resample_cost(identity_plan(block(4), block(4)), (10, 10, 1024), (10, 10, 1024)) == (0, 0)


def test_halving_alpha_halves_first_projection():
    shapes = (40, 40, 1024), (40, 40, 1024)
    full = plan_layers(plan_resample(block(4), block(4), 1), *shapes)[0]
    half = plan_layers(plan_resample(block(4), block(4), 0.5), *shapes)[0]
    assert full.madds == 2 * half.madds


def test_cost_is_additive_over_stages():
    p = plan_resample(block(3), block(6), 0.5)
    layers = plan_layers(p, (32, 32, 512), (4, 4, 1024))
    assert resample_cost(p, (32, 32, 512), (4, 4, 1024))[0] == sum(l.madds for l in layers)
    assert [l.role for l in layers] == [PROJ, CONV_S2, PROJ_TARGET]


def test_stage_mismatch_names_stage():
    p = plan_resample(block(3), block(4), 0.5)
    with pytest.raises(PlanError, match=r"stage 0 \(proj_1x1\)"):
        plan_layers(p, (32, 32, 999), (16, 16, 1024))
    with pytest.raises(PlanError, match="target expects"):
        plan_layers(p, (32, 32, 512), (8, 8, 1024))


def test_non_power_of_two_upsample_rejected():
    p = ResamplePlan("a", "b", 5, 3, (Stage(UPSAMPLE, 8, 8, factor=3),))
    with pytest.raises(PlanError, match="power of two"):
        plan_layers(p, (4, 4, 8), (12, 12, 8))


def test_fuse():
    rng = np.random.default_rng(0)
    a, b, c = (rng.standard_normal((20, 20, 256)) for _ in range(3))
    assert np.array_equal(fuse(a, np.zeros_like(a)), a)
    assert np.array_equal(fuse(a, b), fuse(b, a))
    assert fuse(a, b).shape == (20, 20, 256)
    assert np.allclose(fuse(fuse(a, b), c), fuse(a, fuse(b, c)), atol=1e-6)
    with pytest.raises(PlanError):
        fuse(a, np.zeros((10, 10, 256)))


def test_plan_serializes():
    d = plan_resample(block(5), block(3), 0.5).to_dict()
    assert d["stages"][1] == {"op": UPSAMPLE, "in_ch": 128, "out_ch": 128, "factor": 4}
