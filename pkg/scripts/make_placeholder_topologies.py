"""Regenerate the R35-SP18 / R23-SP30 / R14-SP39 / R0-SP53 spec files.

Only the block budgets of these models are published (stem and
scale-permuted block counts per level); their learned orderings and
connections are not. The files written here hold a seeded sample from the
search space with exactly those budgets, every edge flagged uncertain.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from spinekit.graph_ir import OUTPUT_LEVELS, Edge, graph_to_json
from spinekit.search import SearchSpaceConfig, sample_candidate

SEED = 0
WINDOW = 5

# per-level block counts: stem over L2..L5, scale-permuted over L2..L7
BUDGETS = {
    "r35sp18": ((2, 3, 5, 1), (1, 1, 1, 1, 1, 1)),
    "r23sp30": ((2, 2, 2, 1), (1, 2, 4, 1, 1, 1)),
    "r14sp39": ((1, 1, 1, 1), (2, 3, 5, 1, 1, 1)),
    "r0sp53": ((2, 0, 0, 0), (1, 4, 6, 2, 1, 1)),
}


def space_for(stem_counts, sp_counts) -> SearchSpaceConfig:
    stem = tuple(lv for lv, n in zip(range(2, 6), stem_counts) for _ in range(n))
    inter = []
    for lv, n in zip(range(2, 8), sp_counts):
        inter += [lv] * (n - (1 if lv in OUTPUT_LEVELS else 0))
    return SearchSpaceConfig(intermediate_levels=tuple(inter), stem_levels=stem, parent_window=WINDOW)


def build(name: str):
    cfg = space_for(*BUDGETS[name])
    cand = sample_candidate(cfg, np.random.default_rng(SEED))
    g = cand.graph
    return replace(
        g,
        name=name,
        edges=tuple(Edge(e.parent, e.child, e.kind, uncertain=True) for e in g.edges),
        metadata={
            "placeholder": True,
            "source": (
                "block budget per level is published; ordering and connections are a seeded "
                f"search-space sample (seed {SEED}, parent window {WINDOW}), not the learned topology"
            ),
        },
    )


def main(out_dir: str) -> None:
    for name in BUDGETS:
        path = Path(out_dir) / f"{name}.json"
        path.write_text(graph_to_json(build(name)))
        print(path)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/spinekit/models")
