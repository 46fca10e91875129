"""Fixed block orderings and graph-damage transforms."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from enum import Enum

from .errors import ConfigError, GraphValidationError
from .graph_ir import OUTPUT_LEVELS, BackboneGraph, Edge, require_valid
from .search import (
    Adjustments,
    CandidateArchitecture,
    OrphanError,
    Permutation,
    SearchSpaceConfig,
    assemble_candidate,
    sample_connections,
)


class DamageMode(str, Enum):
    REMOVE_SHORT = "remove_short"
    REMOVE_LONG = "remove_long"
    SEQUENTIAL = "sequential"


DAMAGE_ALIASES = {"short": DamageMode.REMOVE_SHORT, "long": DamageMode.REMOVE_LONG, "sequential": DamageMode.SEQUENTIAL}

# (count, level) runs, stem blocks included
TEMPLATES: dict[str, tuple[tuple[int, int], ...]] = {
    "hourglass": ((3, 2), (3, 3), (5, 4), (1, 5), (1, 7), (1, 6), (1, 5), (1, 4), (1, 3)),
    "fish": ((2, 2), (2, 3), (3, 4), (1, 5), (2, 4), (1, 3), (1, 2), (1, 3), (1, 4), (1, 5), (1, 6), (1, 7)),
}
STEM_BLOCKS = 2


class FixedOrderingTemplate:
    def __init__(self, name: str):
        if name not in TEMPLATES:
            raise ConfigError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}")
        self.name = name
        self.runs = TEMPLATES[name]

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(lv for n, lv in self.runs for _ in range(n))

    def __len__(self) -> int:
        return len(self.levels)


def build_fixed_ordering(t: FixedOrderingTemplate | str) -> tuple[Permutation, SearchSpaceConfig]:
    """The template as a permutation plus the matching connection-search space.

    The first two L2 entries are the stem; the last five blocks are the
    outputs, which in both templates are exactly one block per level L3..L7.
    """
    if isinstance(t, str):
        t = FixedOrderingTemplate(t)
    levels = t.levels
    stem, body = levels[:STEM_BLOCKS], levels[STEM_BLOCKS:]
    outs = body[-len(OUTPUT_LEVELS):]
    if sorted(outs) != list(OUTPUT_LEVELS):
        raise ConfigError(f"template {t.name}: last five blocks {outs} are not one per output level")
    n_inter = len(body) - len(OUTPUT_LEVELS)
    labels = tuple(f"i{k}" for k in range(n_inter)) + tuple(f"o{lv}" for lv in outs)
    perm = Permutation(labels, tuple(body), tuple([False] * n_inter + [True] * len(OUTPUT_LEVELS)))
    cfg = SearchSpaceConfig(intermediate_levels=tuple(body[:n_inter]), stem_levels=tuple(stem), parent_window=5)
    return perm, cfg


def sample_fixed_candidate(
    t: FixedOrderingTemplate | str, rng: np.random.Generator, max_tries: int = 10_000
) -> CandidateArchitecture:
    """Connections searched over a fixed ordering; L2 orphans are redrawn."""
    perm, cfg = build_fixed_ordering(t)
    adjs = Adjustments((0,) * len(perm), (cfg.base_type,) * len(perm))
    name = t if isinstance(t, str) else t.name
    for _ in range(max_tries):
        try:
            return assemble_candidate(perm, sample_connections(perm, cfg, rng), adjs, cfg, name=name)
        except OrphanError:
            continue
    raise ConfigError(f"no assemblable wiring for template {name} after {max_tries} draws")


def _distance(g: BackboneGraph, parent: str, child: str, by: str) -> int:
    p, c = g.block(parent), g.block(child)
    if by == "ordering":
        return c.ordering - p.ordering
    if by == "level":
        return abs(c.level - p.level)
    raise ConfigError(f"unknown distance {by!r}")


def apply_graph_damage(g: BackboneGraph, mode: DamageMode | str, distance: str = "ordering") -> BackboneGraph:
    """Leave each scale-permuted block exactly one parent.

    Orphan edges are dropped first. Blocks that already have a single parent
    are left alone, so every mode is idempotent. With ``distance="level"``
    ties are broken by ordering distance.
    """
    mode = DAMAGE_ALIASES.get(mode, mode) if isinstance(mode, str) else mode
    mode = DamageMode(mode)
    require_valid(g, relaxed=True)
    order = {b.id: b.ordering for b in g.blocks}
    by_order = {b.ordering: b for b in g.blocks}
    edges = [e for e in g.edges if e.kind == "connection"]
    out: list[Edge] = []
    for b in sorted(g.permuted, key=lambda b: b.ordering):
        parents = [e for e in edges if e.child == b.id]
        if len(parents) == 1:
            out += parents
            continue
        if len(parents) != 2:
            raise GraphValidationError([f"block {b.id} has {len(parents)} parents; damage needs 2"])
        if mode is DamageMode.SEQUENTIAL:
            prev = by_order[b.ordering - 1]
            out.append(Edge(prev.id, b.id))
            continue
        key = lambda e: (_distance(g, e.parent, b.id, distance), b.ordering - order[e.parent])  # noqa: E731
        short, long_ = sorted(parents, key=key)
        out.append(long_ if mode is DamageMode.REMOVE_SHORT else short)
    suffix = f"-{mode.value}"
    name = g.name if g.name.endswith(suffix) else g.name + suffix
    damaged = replace(g, name=name, edges=tuple(out))
    require_valid(damaged, relaxed=True)
    return damaged
