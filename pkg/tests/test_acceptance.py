"""Acceptance criteria 1-9, one PASS/FAIL line per criterion in the terminal summary."""

import json
import math
import time
from fractions import Fraction
from itertools import combinations, product

import numpy as np

from oracles import brute_connection_count, brute_permutation_count, dump_rows, flat_sum, formula_space
from spinekit import golden
from spinekit.ablation import apply_graph_damage
from spinekit.cost_model import count_model, model_layers
from spinekit.executor import forward, forward_all, init_weights, random_input, softmax
from spinekit.graph_ir import graph_from_json, graph_to_json, infer_shapes, validate_graph
from spinekit.model_zoo import ModelWithHead, VariantId, build_model, build_variant, load_entry
from spinekit.resampling import plan_edge
from spinekit.search import (
    Adjustments,
    NegFlopsReward,
    SearchSpaceConfig,
    adjustment_factor,
    assemble_candidate,
    candidate_pool,
    connection_factor,
    enumerate_adjustments,
    enumerate_connections,
    enumerate_permutations,
    permutation_factor,
    run_search,
    sample_candidate,
    space_size,
    spinenet49_space,
)

RESULTS: dict[int, tuple[str, str]] = {}


def report(n: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    RESULTS[n] = (status, detail)
    print(f"criterion {n}: {status} {detail}")
    assert ok, detail


def within(got, want, tol):
    return abs(got - want) / want <= tol


def golden_rows(table, expected, tol):
    """Check both the shipped golden file and the literal values below."""
    lines, ok = [], True
    for (model, res), (madds_b, params_m) in expected.items():
        row = golden.find_row(table, model, res)
        assert math.isclose(row.madds, madds_b * 1e9) and row.tolerance == tol
        if params_m is not None:
            assert math.isclose(row.params, params_m * 1e6)
        t0 = time.perf_counter()
        r = count_model(build_model(model, row.head), res)
        dt = time.perf_counter() - t0
        good = within(r.madds, madds_b * 1e9, tol) and (params_m is None or within(r.params, params_m * 1e6, tol))
        ok &= good and dt < 1.0
        lines.append(
            f"{model}@{res} {r.madds / 1e9:.2f}B/{r.params / 1e6:.2f}M vs {madds_b}B/{params_m}M {dt * 1e3:.0f}ms {'ok' if good else 'MISS'}"
        )
    return ok, "; ".join(lines)


def test_criterion_1_retinanet_costs():
    ok, detail = golden_rows(
        "table2",
        {
            ("spinenet49s", 640): (33.8, 11.9),
            ("spinenet49", 640): (85.4, 28.5),
            ("spinenet49", 896): (167.4, None),
            ("spinenet96", 1024): (265.4, 43.0),
            ("spinenet143", 1280): (524.4, 66.9),
            ("spinenet190", 1280): (1885.0, 163.6),
            ("resnet50fpn", 640): (96.8, 34.0),
        },
        0.05,
    )
    report(1, ok, detail)


def test_criterion_2_r0sp53_ratio():
    # only the R0-SP53 level budget is published; the shipped wiring is a seeded
    # placeholder, so other wirings with the same budget are checked as well
    sn = count_model(build_model("spinenet49", "retinanet"), 640).madds
    r0_model = build_model("r0sp53", "retinanet")
    ratio = sn / count_model(r0_model, 640).madds
    g = r0_model.graph
    budget = (
        tuple(sum(b.level == lv for b in g.stem) for lv in range(2, 6)),
        tuple(sum(b.level == lv for b in g.permuted) for lv in range(2, 8)),
    )
    cfg = SearchSpaceConfig(
        intermediate_levels=tuple(sorted(b.level for b in g.permuted if not b.is_output)),
        stem_levels=tuple(b.level for b in g.stem),
        parent_window=5,
    )
    rng = np.random.default_rng(7)
    ratios = [
        sn / count_model(ModelWithHead(sample_candidate(cfg, rng).graph, r0_model.head), 640).madds for _ in range(10)
    ]
    ok = budget == ((2, 0, 0, 0), (1, 4, 6, 2, 1, 1)) and 0.86 <= ratio <= 0.94 and all(0.86 <= r <= 0.94 for r in ratios)
    note = " (placeholder wiring)" if g.metadata.get("placeholder") else ""
    report(2, ok, f"ratio {ratio:.3f}{note}; 10 alternative wirings {min(ratios):.3f}..{max(ratios):.3f}; target [0.86, 0.94]")


def test_criterion_3_classifier_costs():
    ok, detail = golden_rows(
        "table4",
        {
            ("spinenet49", 224): (3.5, 22.1),
            ("spinenet96", 224): (5.7, 36.5),
            ("spinenet143", 224): (9.1, 60.5),
            ("resnet50", 224): (4.1, 25.6),
        },
        0.05,
    )
    report(3, ok, detail)


def test_criterion_4_mobile_costs():
    ok, detail = golden_rows(
        "table7",
        {
            ("spinenet49xs_mb", 256): (0.17, 0.82),
            ("spinenet49s_mb", 384): (0.52, 0.97),
            ("spinenet49_mb", 384): (1.00, 2.32),
        },
        0.08,
    )
    report(4, ok, detail)


def test_criterion_5_maskrcnn_cost():
    m = build_model("spinenet49", "maskrcnn")
    assert m.head.proposals == 1000
    ok, detail = golden_rows("table3", {("spinenet49", 640): (216.1, 40.8)}, 0.10)
    report(5, ok, detail)


# --- criterion 6 ------------------------------------------------------------

INTER = {0: (), 1: (3,), 2: (3, 4), 3: (3, 4, 5)}
STEMS = {2: (2, 2), 3: (2, 2, 3)}


def topology(g):
    """Hashable structure: levels, kinds and outputs by ordering, edges by ordering."""
    order = {b.id: b.ordering for b in g.blocks}
    blocks = tuple(sorted((b.ordering, b.level, b.kind.value, b.is_output) for b in g.blocks))
    edges = tuple(sorted((order[e.parent], order[e.child], e.kind) for e in g.edges))
    return blocks, edges


def base_perm(cfg):
    return next(enumerate_permutations(cfg))


def stem_conns(cfg):
    return [(0, 1)] * cfg.n


def plain_adjs(cfg):
    return Adjustments((0,) * cfg.n, (cfg.base_type,) * cfg.n)


def count_permutations(cfg):
    conns, adjs = stem_conns(cfg), plain_adjs(cfg)
    seen = {topology(assemble_candidate(p, conns, adjs, cfg).graph) for p in enumerate_permutations(cfg)}
    return len(seen)


def count_connections_jointly(cfg):
    perm, adjs = base_perm(cfg), plain_adjs(cfg)
    return len({topology(assemble_candidate(perm, c, adjs, cfg).graph) for c in enumerate_connections(perm, cfg)})


def count_connections_per_block(cfg):
    """Vary one block's parent pair at a time; the product of distinct counts."""
    perm, adjs = base_perm(cfg), plain_adjs(cfg)
    base = stem_conns(cfg)
    total = 1
    for j in range(cfg.n):
        pool = candidate_pool(j, perm.outputs[j], cfg.m, cfg.parent_window)
        seen = set()
        for pair in combinations(pool, 2):
            conns = list(base)
            conns[j] = pair
            g = assemble_candidate(perm, conns, adjs, cfg).graph
            child = perm.labels[j]
            seen.add(frozenset(e.parent for e in g.edges if e.child == child and e.kind == "connection"))
        total *= len(seen)
    return total


def count_adjustments(cfg):
    perm = base_perm(cfg)
    n_inter = len(cfg.intermediate_levels)
    # outputs consume every intermediate, so no adjusted level is ever orphaned
    conns = stem_conns(cfg)
    if n_inter:
        first_out = n_inter
        conns[first_out] = (cfg.m, cfg.m + n_inter - 1) if n_inter > 1 else (0, cfg.m)
        for j in range(1, n_inter - 1):
            conns[first_out + j] = (0, cfg.m + j)
    seen = {topology(assemble_candidate(perm, conns, a, cfg).graph) for a in enumerate_adjustments(perm, cfg)}
    return len(seen)


def test_criterion_6_space_enumeration():
    t0 = time.perf_counter()
    lines, ok = [], True
    for n_inter, m in product(range(4), (2, 3)):
        cfg = SearchSpaceConfig(INTER[n_inter], STEMS[m], enable_adjustments=True)
        plain = SearchSpaceConfig(INTER[n_inter], STEMS[m])
        perm_n = count_permutations(plain)
        conn_n = count_connections_per_block(plain)
        adj_n = count_adjustments(cfg)
        size = space_size(cfg)
        good = (
            perm_n == permutation_factor(cfg) == brute_permutation_count(n_inter)
            and conn_n == connection_factor(cfg) == brute_connection_count(m, n_inter)
            and adj_n == adjustment_factor(cfg) == 4**n_inter * 2 ** (n_inter + 5)
            and size == perm_n * conn_n * adj_n == formula_space(n_inter + 5, m, adjustments=True)
        )
        ok &= good
        lines.append(f"N-5={n_inter},m={m}: {perm_n}x{conn_n}x{adj_n}={size}{'' if good else ' MISMATCH'}")
    # joint connection enumeration where the space is small enough to assemble every graph
    for n_inter, m in ((0, 2), (0, 3), (1, 2)):
        cfg = SearchSpaceConfig(INTER[n_inter], STEMS[m])
        got = count_connections_jointly(cfg)
        ok &= got == connection_factor(cfg)
        lines.append(f"joint conns N-5={n_inter},m={m}: {got}")
    dt = time.perf_counter() - t0
    ok &= dt < 30
    report(6, ok, f"{'; '.join(lines)}; {dt:.1f}s")


# --- criterion 7 ------------------------------------------------------------

def test_criterion_7_property_suite():
    cfg = spinenet49_space()
    rng = np.random.default_rng(20240607)
    valid = dangling = bad_plans = damage_bad = 0
    samples = 10_000
    for k in range(samples):
        g = sample_candidate(cfg, rng).graph
        valid += validate_graph(g) == []
        consumers = {e.parent for e in g.edges}
        dangling += sum(1 for b in g.permuted if not b.is_output and b.id not in consumers)
        for e in g.edges:
            pl, tl = g.block(e.parent).level, g.block(e.child).level
            bad_plans += plan_edge(g, e).spatial_factor != Fraction(2) ** (pl - tl)
        if k % 10 == 0:
            short, long_ = apply_graph_damage(g, "short"), apply_graph_damage(g, "long")
            seq = apply_graph_damage(g, "sequential")
            idem = all(apply_graph_damage(d, mode).edges == d.edges for d, mode in ((short, "short"), (long_, "long"), (seq, "sequential")))
            part = all(
                sorted(e.parent for e in short.edges + long_.edges if e.child == b.id)
                == sorted(e.parent for e in g.edges if e.child == b.id and e.kind == "connection")
                for b in g.permuted
            )
            damage_bad += not (idem and part)
    ok = valid == samples and dangling == 0 and bad_plans == 0 and damage_bad == 0
    report(
        7,
        ok,
        f"{valid}/{samples} valid, {dangling} dangling intermediates, {bad_plans} bad spatial factors, "
        f"{damage_bad} damage failures over {samples // 10} checked",
    )


# --- criterion 8 ------------------------------------------------------------

def test_criterion_8_executor():
    problems = []
    for v in VariantId:
        m = ModelWithHead(build_variant(v))
        w = init_weights(m, 0)
        for res in (128, 256):
            feats = forward_all(m, w, random_input(res, 0))
            expected = infer_shapes(m.graph, res)
            if {k: feats[k].shape for k in expected} != expected:
                problems.append(f"shape {v.value}@{res}")
    proxy = ModelWithHead(build_variant("spinenet49"))
    x = random_input(128, 1)
    w = init_weights(proxy, 0)
    a = forward(proxy, w, x)
    b = forward(proxy, init_weights(proxy, 0), x)
    if not all(np.array_equal(a[k], b[k]) for k in a):
        problems.append("determinism")
    g = proxy.graph
    from dataclasses import replace

    swapped = ModelWithHead(graph_from_json(graph_to_json(replace(g, edges=tuple(reversed(g.edges))))))
    c = forward(swapped, init_weights(swapped, 0), x)
    if not all(np.array_equal(a[k], c[k]) for k in a):
        problems.append("fusion order")
    rng = np.random.default_rng(0)
    worst = max(abs(softmax(rng.standard_normal(1000) * s).sum() - 1) for s in (0.1, 1, 10, 100))
    if worst > 1e-6:
        problems.append(f"softmax {worst:.2e}")
    oracle_checked = 0
    for v in VariantId:
        entry = load_entry(v)
        for kind in entry.heads or {"classifier": {}}:
            mm = build_model(v, kind)
            res = entry.resolution.get(kind, 256)
            if flat_sum(dump_rows(model_layers(mm, res))) != count_model(mm, res).grand_total:
                problems.append(f"oracle {v.value}/{kind}")
            oracle_checked += 1
    report(
        8,
        not problems,
        f"shapes for {len(VariantId)} models x 2 resolutions, determinism, fusion order, softmax max err {worst:.1e}, "
        f"per-layer oracle on {oracle_checked} model/head pairs; problems: {problems or 'none'}",
    )


# --- criterion 9 ------------------------------------------------------------

def test_criterion_9_search_reproducibility():
    cfg = spinenet49_space()
    reward = NegFlopsReward()
    t0 = time.perf_counter()
    a = run_search(cfg, "evolution", reward, 200, seed=11)
    dt = time.perf_counter() - t0
    b = run_search(cfg, "evolution", reward, 200, seed=11)
    r1 = run_search(cfg, "random", reward, 50, seed=5)
    r2 = run_search(cfg, "random", reward, 50, seed=5, workers=4)
    same = [r.to_json() for r in a.history] == [r.to_json() for r in b.history]
    same_random = [r.to_json() for r in r1.history] == [r.to_json() for r in r2.history]
    curve = a.best_so_far()
    monotone = all(x <= y for x, y in zip(curve, curve[1:]))
    ok = same and same_random and monotone and dt < 30
    report(9, ok, f"bit-identical history {same}, threaded random identical {same_random}, monotone {monotone}, budget-200 in {dt:.2f}s")


def test_results_serialize():
    # keeps the summary table machine readable for CI logs
    json.dumps(RESULTS)
