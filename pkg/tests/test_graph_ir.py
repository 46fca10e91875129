from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinekit.errors import GraphValidationError, ShapeError, SpecLoadError
from spinekit.graph_ir import (
    BackboneGraph,
    BlockKind,
    BlockSpec,
    Edge,
    graph_from_json,
    graph_to_json,
    infer_shapes,
    round_half_up,
    scale_width,
    to_dot,
    topological_order,
    validate_graph,
)
from spinekit.model_zoo import VariantId, build_variant

ZOO = [v.value for v in VariantId]


def codes(g, relaxed=False):
    return {v.code for v in validate_graph(g, relaxed=relaxed)}


def tiny_graph():
    """Two stem blocks feeding five output blocks in a chain."""
    stem = (
        BlockSpec("s0", 0, 2, BlockKind.BOTTLENECK, 64, is_stem=True),
        BlockSpec("s1", 1, 2, BlockKind.BOTTLENECK, 64, is_stem=True),
    )
    outs = tuple(BlockSpec(f"o{lv}", 1 + i + 1, lv, BlockKind.RESIDUAL, 32, is_output=True) for i, lv in enumerate(range(3, 8)))
    ids = ["s0", "s1"] + [b.id for b in outs]
    edges = tuple(e for k in range(2, len(ids)) for e in (Edge(ids[k - 2], ids[k]), Edge(ids[k - 1], ids[k])))
    return BackboneGraph("tiny", stem=stem, permuted=outs, edges=edges)


def test_tiny_graph_is_valid():
    assert validate_graph(tiny_graph()) == []


@pytest.mark.parametrize("name", ZOO)
def test_zoo_graphs_validate(name):
    assert validate_graph(build_variant(name)) == []


def test_spinenet49_block_budget(sn49):
    assert len(sn49.stem) == 2 and {b.level for b in sn49.stem} == {2}
    per_level = {lv: sum(1 for b in sn49.permuted if b.level == lv) for lv in range(2, 8)}
    # 15 permuted blocks per the per-level table
    assert per_level == {2: 1, 3: 2, 4: 4, 5: 4, 6: 2, 7: 2}
    kinds = {b.kind for b in sn49.permuted}
    assert kinds == {BlockKind.BOTTLENECK, BlockKind.RESIDUAL}


def test_backward_edge_reported():
    g = tiny_graph()
    g = replace(g, edges=g.edges + (Edge("o5", "o4"),))
    assert "ordering" in codes(g)


def test_duplicate_output_level_reported():
    g = tiny_graph()
    blocks = list(g.permuted)
    blocks[-1] = replace(blocks[-1], level=3)
    assert "duplicate_output_level" in codes(replace(g, permuted=tuple(blocks)))


def test_dangling_intermediate_reported(sn49):
    g = replace(sn49, edges=tuple(e for e in sn49.edges if e.kind != "orphan"))
    assert "dangling" in codes(g)
    assert "dangling" not in codes(g, relaxed=True)


def test_duplicate_parent_and_unknown_block():
    g = tiny_graph()
    g2 = replace(g, edges=g.edges + (Edge("s1", "o4"),))
    assert "duplicate_parent" in codes(g2)
    g3 = replace(g, edges=g.edges + (Edge("nope", "o4"),))
    assert "unknown_block" in codes(g3)


def test_report_lists_every_violation():
    g = tiny_graph()
    blocks = list(g.permuted)
    blocks[0] = replace(blocks[0], width=0)
    g = replace(g, permuted=tuple(blocks), edges=g.edges + (Edge("o7", "o3"),))
    assert {"width", "ordering"} <= codes(g)


@pytest.mark.parametrize("name", ZOO)
def test_removing_any_edge_is_detected(name):
    g = build_variant(name)
    for e in g.edges:
        damaged = replace(g, edges=tuple(x for x in g.edges if x is not e))
        assert validate_graph(damaged), f"removing {e} went unnoticed"


def test_topological_order_chain():
    assert topological_order(tiny_graph()) == ["s0", "s1", "o3", "o4", "o5", "o6", "o7"]


@pytest.mark.parametrize("name", ZOO)
def test_topological_order_respects_edges(name):
    g = build_variant(name)
    order = topological_order(g)
    assert sorted(order) == sorted(b.id for b in g.blocks)
    pos = {b: i for i, b in enumerate(order)}
    assert all(pos[e.parent] < pos[e.child] for e in g.edges)


def test_topological_order_rejects_invalid():
    g = tiny_graph()
    with pytest.raises(GraphValidationError):
        topological_order(replace(g, edges=g.edges + (Edge("o5", "o4"),)))


def test_spinenet49_shapes_at_640(sn49):
    s = infer_shapes(sn49, 640)
    by_level = {sn49.block(k).level: v[0] for k, v in s.items() if not k.startswith("P")}
    assert by_level[3] == 80 and by_level[5] == 20 and by_level[7] == 5
    assert s["P3"] == (80, 80, 256) and s["P7"] == (5, 5, 256)


def test_resnet_fpn_pyramid():
    s = infer_shapes(build_variant("resnet50fpn"), 640)
    assert [s[f"P{lv}"] for lv in range(3, 8)] == [(r, r, 256) for r in (80, 40, 20, 10, 5)]


def test_underflow_names_level(sn49):
    with pytest.raises(ShapeError, match="L7"):
        infer_shapes(sn49, 2)
    with pytest.raises(ShapeError):
        infer_shapes(sn49, 63)


@pytest.mark.parametrize("name", ZOO)
@pytest.mark.parametrize("res", [128, 256, 640])
def test_shapes_follow_level_rule(name, res):
    g = build_variant(name)
    s = infer_shapes(g, res)
    for b in g.blocks:
        assert s[b.id] == (res // 2**b.level, res // 2**b.level, b.channels)


def test_shapes_at_64_underflow_only_for_deep_levels(sn49):
    with pytest.raises(ShapeError, match="L7"):
        infer_shapes(sn49, 64)


def test_channels_per_kind():
    assert BlockSpec("a", 0, 3, BlockKind.BOTTLENECK, 64).channels == 256
    assert BlockSpec("a", 0, 3, BlockKind.RESIDUAL, 64).channels == 64
    assert BlockSpec("a", 0, 3, BlockKind.MBCONV, 40).channels == 40


def test_half_up_rounding():
    assert round_half_up(2.5) == 3 and round_half_up(3.5) == 4
    assert scale_width(80, 0.6) == 48
    assert scale_width(64, 0.65) == 42  # 41.6
    assert scale_width(3, 0.5) == 2  # 1.5 rounds up


@pytest.mark.parametrize("name", ZOO)
def test_json_round_trip(name):
    g = build_variant(name)
    text = graph_to_json(g)
    back = graph_from_json(text)
    assert back == g
    assert graph_to_json(back) == text


def test_load_errors():
    with pytest.raises(SpecLoadError):
        graph_from_json("{not json")
    with pytest.raises(SpecLoadError):
        graph_from_json('{"format": "something.else"}')
    with pytest.raises(SpecLoadError):
        graph_from_json('{"blocks": []}')


def test_unknown_keys_ignored(sn49):
    import json

    d = json.loads(graph_to_json(sn49))
    d["comment"] = "free text"
    assert graph_from_json(json.dumps(d)) == sn49


def test_dot_one_node_per_block(sn49):
    dot = to_dot(sn49)
    nodes = [l for l in dot.splitlines() if "[label=" in l]
    assert len(nodes) == len(sn49.blocks)
    assert '"b2" [label="L2/bottleneck/64", shape=box' in dot
    assert "shape=diamond" in dot  # residual blocks
    edges = [l for l in dot.splitlines() if "->" in l]
    orphans = sum(1 for e in sn49.edges if e.kind == "orphan")
    assert len(edges) == 2 * len(sn49.permuted) + orphans + len(sn49.stem) - 1


@given(st.integers(1, 4), st.sampled_from([0.25, 0.5, 0.65, 1.0, 1.3]))
def test_repeat_and_width_round_trip(repeat, factor):
    from spinekit.model_zoo import scale_variant

    g = scale_variant(build_variant("spinenet49"), repeat, factor)
    assert graph_from_json(graph_to_json(g)) == g
