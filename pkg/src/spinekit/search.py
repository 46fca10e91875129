"""Scale-permuted search space: sampling, assembly, sizing and search loops.

A candidate is three independent decisions made in build order:

* a permutation: intermediate blocks shuffled among themselves, the five
  output blocks (L3..L7) shuffled among the last five positions;
* connections: for the j-th built block, an unordered pair of distinct
  parents drawn from the stem candidates plus the j-1 blocks already built
  (intermediates may be limited to the most recent ``parent_window``);
* adjustments: a level delta per intermediate block and a block type per
  block.

Connections are stored as positions in that candidate pool, so any
permutation or adjustment change leaves them well-formed.
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations, permutations, product
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, SpineError
from .graph_ir import (
    OUTPUT_LEVELS,
    BackboneGraph,
    BlockKind,
    BlockSpec,
    Edge,
    as_fraction,
    graph_to_dict,
    require_valid,
)
from .model_zoo import ModelWithHead, scale_variant

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = {2: 64, 3: 128, 4: 256, 5: 256, 6: 256, 7: 256}
LEVEL_DELTAS = (-1, 0, 1, 2)
BLOCK_TYPES = ("bottleneck", "residual")
MIN_LEVEL, MAX_LEVEL = 2, 7
FAILED_REWARD = float("-inf")


class OrphanError(SpineError):
    """An unconsumed intermediate sits at a level with no output block."""


@dataclass(frozen=True)
class SearchSpaceConfig:
    intermediate_levels: tuple[int, ...]
    stem_levels: tuple[int, ...] = (2, 2)
    parent_window: int | None = None
    enable_adjustments: bool = False
    level_deltas: tuple[int, ...] = LEVEL_DELTAS
    block_types: tuple[str, ...] = BLOCK_TYPES
    base_type: str = "bottleneck"
    level_widths: Mapping[int, int] = field(default_factory=lambda: dict(DEFAULT_WIDTHS))
    alpha: float = 0.5
    output_dim: int = 256

    def __post_init__(self):
        if len(self.stem_levels) < 2:
            raise ConfigError("need at least 2 stem candidates (the first block takes 2 distinct parents)")
        if self.parent_window is not None and self.parent_window < 2:
            raise ConfigError("parent_window must be >= 2")
        for lv in self.intermediate_levels:
            if not MIN_LEVEL <= lv <= MAX_LEVEL:
                raise ConfigError(f"intermediate level L{lv} outside L{MIN_LEVEL}..L{MAX_LEVEL}")
        prev = 1
        for lv in self.stem_levels:
            if lv not in (prev, prev + 1) or not 2 <= lv <= 5:
                raise ConfigError(f"stem levels must climb from L2 one level at a time, got {self.stem_levels}")
            prev = lv
        for t in (*self.block_types, self.base_type):
            BlockKind(t)

    @property
    def m(self) -> int:
        return len(self.stem_levels)

    @property
    def n(self) -> int:
        return len(self.intermediate_levels) + len(OUTPUT_LEVELS)

    def width(self, level: int) -> int:
        return int(self.level_widths[level])

    def to_dict(self) -> dict:
        return {
            "intermediate_levels": list(self.intermediate_levels),
            "stem_levels": list(self.stem_levels),
            "parent_window": self.parent_window,
            "enable_adjustments": self.enable_adjustments,
            "level_deltas": list(self.level_deltas),
            "block_types": list(self.block_types),
            "base_type": self.base_type,
            "level_widths": {str(k): v for k, v in sorted(self.level_widths.items())},
            "alpha": self.alpha,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchSpaceConfig":
        try:
            kw = dict(d)
            for key in ("intermediate_levels", "stem_levels", "level_deltas", "block_types"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            if "level_widths" in kw:
                kw["level_widths"] = {int(k): int(v) for k, v in kw["level_widths"].items()}
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad search space config: {exc}") from exc


def spinenet49_space(**overrides) -> SearchSpaceConfig:
    """The block budget of SpineNet-49 with the search-time parent window."""
    base = dict(
        intermediate_levels=(2, 3, 4, 4, 4, 5, 5, 5, 6, 7),
        stem_levels=(2, 2),
        parent_window=5,
        enable_adjustments=True,
    )
    base.update(overrides)
    return SearchSpaceConfig(**base)


@dataclass(frozen=True)
class Permutation:
    labels: tuple[str, ...]
    levels: tuple[int, ...]
    outputs: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Adjustments:
    deltas: tuple[int, ...]
    types: tuple[str, ...]


@dataclass
class CandidateArchitecture:
    permutation: Permutation
    connections: tuple[tuple[int, int], ...]
    adjustments: Adjustments
    graph: BackboneGraph
    reward: float | None = None

    def key(self) -> tuple:
        return (self.permutation.labels, self.connections, self.adjustments.deltas, self.adjustments.types)

    def to_dict(self) -> dict:
        return {
            "permutation": list(self.permutation.labels),
            "levels": list(self.permutation.levels),
            "connections": [list(c) for c in self.connections],
            "level_deltas": list(self.adjustments.deltas),
            "block_types": list(self.adjustments.types),
            "graph": graph_to_dict(self.graph),
        }


# --- labels and permutations ------------------------------------------------

def base_blocks(cfg: SearchSpaceConfig) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
    inter = [(f"i{k}", lv) for k, lv in enumerate(cfg.intermediate_levels)]
    outs = [(f"o{lv}", lv) for lv in OUTPUT_LEVELS]
    return inter, outs


def _make_perm(inter, outs) -> Permutation:
    seq = list(inter) + list(outs)
    return Permutation(
        labels=tuple(l for l, _ in seq),
        levels=tuple(lv for _, lv in seq),
        outputs=tuple([False] * len(inter) + [True] * len(outs)),
    )


def sample_permutation(cfg: SearchSpaceConfig, rng: np.random.Generator) -> Permutation:
    inter, outs = base_blocks(cfg)
    inter = [inter[i] for i in rng.permutation(len(inter))]
    outs = [outs[i] for i in rng.permutation(len(outs))]
    return _make_perm(inter, outs)


def enumerate_permutations(cfg: SearchSpaceConfig) -> Iterator[Permutation]:
    inter, outs = base_blocks(cfg)
    for pi in permutations(inter):
        for po in permutations(outs):
            yield _make_perm(pi, po)


# --- connections -----------------------------------------------------------

def candidate_pool(position: int, is_output: bool, m: int, window: int | None) -> range:
    """Pool indices (0..m-1 stem, m+k the k-th built block) open to a block."""
    size = m + position
    if window is not None and not is_output:
        return range(max(0, size - window), size)
    return range(size)


def _pools(perm: Permutation, m: int, window: int | None) -> list[range]:
    pools = [candidate_pool(j, out, m, window) for j, out in enumerate(perm.outputs)]
    for j, pool in enumerate(pools):
        if len(pool) < 2:
            raise ConfigError(f"block {perm.labels[j]} has a parent pool of size {len(pool)}; need 2")
    return pools


def sample_connections(perm: Permutation, cfg: SearchSpaceConfig, rng: np.random.Generator) -> tuple[tuple[int, int], ...]:
    conns = []
    for pool in _pools(perm, cfg.m, cfg.parent_window):
        a, b = rng.choice(len(pool), size=2, replace=False)
        lo, hi = sorted((pool[int(a)], pool[int(b)]))
        conns.append((lo, hi))
    return tuple(conns)


def enumerate_connections(perm: Permutation, cfg: SearchSpaceConfig) -> Iterator[tuple[tuple[int, int], ...]]:
    pools = _pools(perm, cfg.m, cfg.parent_window)
    yield from product(*(list(combinations(pool, 2)) for pool in pools))


# --- adjustments -----------------------------------------------------------

def clamp_level(level: int) -> int:
    return min(MAX_LEVEL, max(MIN_LEVEL, level))


def sample_adjustments(perm: Permutation, cfg: SearchSpaceConfig, rng: np.random.Generator) -> Adjustments:
    if not cfg.enable_adjustments:
        return Adjustments((0,) * len(perm), (cfg.base_type,) * len(perm))
    deltas = tuple(0 if out else int(cfg.level_deltas[rng.integers(len(cfg.level_deltas))]) for out in perm.outputs)
    types = tuple(cfg.block_types[rng.integers(len(cfg.block_types))] for _ in perm.outputs)
    return Adjustments(deltas, types)


def enumerate_adjustments(perm: Permutation, cfg: SearchSpaceConfig) -> Iterator[Adjustments]:
    if not cfg.enable_adjustments:
        yield Adjustments((0,) * len(perm), (cfg.base_type,) * len(perm))
        return
    n_inter = sum(1 for o in perm.outputs if not o)
    for ds in product(cfg.level_deltas, repeat=n_inter):
        deltas = tuple(ds) + (0,) * (len(perm) - n_inter)
        for ts in product(cfg.block_types, repeat=len(perm)):
            yield Adjustments(deltas, tuple(ts))


# --- assembly --------------------------------------------------------------

def search_stem(cfg: SearchSpaceConfig) -> tuple[BlockSpec, ...]:
    return tuple(
        BlockSpec(f"stem{i}", i, lv, BlockKind.BOTTLENECK, cfg.width(lv), is_stem=True)
        for i, lv in enumerate(cfg.stem_levels)
    )


def assemble_candidate(
    perm: Permutation,
    conns: Sequence[tuple[int, int]],
    adjs: Adjustments,
    cfg: SearchSpaceConfig,
    name: str = "candidate",
) -> CandidateArchitecture:
    """Build and validate the graph, wiring unconsumed intermediates to outputs.

    Raises OrphanError when an unconsumed intermediate ends up at L2, where
    there is no output block to absorb it.
    """
    if not (len(perm) == len(conns) == len(adjs.deltas) == len(adjs.types)):
        raise ConfigError("permutation, connections and adjustments disagree in length")
    stem = search_stem(cfg)
    m = len(stem)
    blocks = []
    for j, label in enumerate(perm.labels):
        level = perm.levels[j] if perm.outputs[j] else clamp_level(perm.levels[j] + adjs.deltas[j])
        blocks.append(
            BlockSpec(label, m + j, level, BlockKind(adjs.types[j]), cfg.width(level), is_output=perm.outputs[j])
        )
    pool = list(stem) + blocks
    edges = []
    for j, (a, b) in enumerate(conns):
        if not (0 <= a < b < m + j):
            raise ConfigError(f"connection {(a, b)} of block {perm.labels[j]} is outside its pool")
        edges += [Edge(pool[a].id, blocks[j].id), Edge(pool[b].id, blocks[j].id)]
    consumed = {e.parent for e in edges}
    outputs = {b.level: b for b in blocks if b.is_output}
    for b in blocks:
        if b.is_output or b.id in consumed:
            continue
        target = outputs.get(b.level)
        if target is None:
            raise OrphanError(f"unconsumed block {b.id} at L{b.level} has no output block")
        edges.append(Edge(b.id, target.id, kind="orphan"))
    g = BackboneGraph(
        name=name,
        stem=stem,
        permuted=tuple(blocks),
        edges=tuple(edges),
        output_dim=cfg.output_dim,
        alpha=as_fraction(cfg.alpha),
    )
    require_valid(g)
    return CandidateArchitecture(perm, tuple(conns), adjs, g)


def sample_candidate(cfg: SearchSpaceConfig, rng: np.random.Generator, max_tries: int = 10_000) -> CandidateArchitecture:
    for _ in range(max_tries):
        perm = sample_permutation(cfg, rng)
        conns = sample_connections(perm, cfg, rng)
        adjs = sample_adjustments(perm, cfg, rng)
        try:
            return assemble_candidate(perm, conns, adjs, cfg)
        except OrphanError as exc:
            log.debug("resampling candidate: %s", exc)
    raise ConfigError(f"no assemblable candidate after {max_tries} draws")


# --- sizes -----------------------------------------------------------------

def permutation_factor(cfg: SearchSpaceConfig) -> int:
    return math.factorial(cfg.n - len(OUTPUT_LEVELS)) * math.factorial(len(OUTPUT_LEVELS))


def connection_factor(cfg: SearchSpaceConfig) -> int:
    n_inter = len(cfg.intermediate_levels)
    total = 1
    for j in range(cfg.n):
        total *= math.comb(len(candidate_pool(j, j >= n_inter, cfg.m, cfg.parent_window)), 2)
    return total


def adjustment_factor(cfg: SearchSpaceConfig) -> int:
    if not cfg.enable_adjustments:
        return 1
    n_inter = len(cfg.intermediate_levels)
    return len(cfg.level_deltas) ** n_inter * len(cfg.block_types) ** cfg.n


def space_size(cfg: SearchSpaceConfig) -> int:
    """Exact size of the space (before the L2-orphan rejection)."""
    return permutation_factor(cfg) * connection_factor(cfg) * adjustment_factor(cfg)


# --- proxy -----------------------------------------------------------------

PROXY_WIDTH_FACTOR = 0.25
PROXY_ALPHA = 0.25
PROXY_HEAD_WIDTH = 64


def make_proxy(g: BackboneGraph) -> BackboneGraph:
    require_valid(g)
    p = scale_variant(g, 1, PROXY_WIDTH_FACTOR, PROXY_ALPHA)
    return replace(p, name=f"{g.name}-proxy", head_width=PROXY_HEAD_WIDTH)


# --- rewards ---------------------------------------------------------------

class NegFlopsReward:
    """Negative backbone multiply-adds at a fixed input resolution."""

    def __init__(self, resolution: int = 256):
        self.resolution = resolution

    def __call__(self, cand: CandidateArchitecture) -> float:
        from .cost_model import count_model

        return -float(count_model(ModelWithHead(cand.graph), self.resolution).madds)


def graph_score(cand: CandidateArchitecture) -> float:
    """Synthetic reward: favours cross-scale and long-range connections."""
    g = cand.graph
    order = {b.id: (b.ordering, b.level) for b in g.blocks}
    score = 0.0
    for e in g.edges:
        (po, pl), (co, cl) = order[e.parent], order[e.child]
        score += abs(pl - cl) + 0.1 * (co - po)
    return score / max(1, len(g.edges))


class ExecReward:
    """Delegates scoring to a command: candidate JSON on stdin, one float on stdout."""

    def __init__(self, command: str, timeout: float | None = None):
        self.command = command
        self.timeout = timeout

    def __call__(self, cand: CandidateArchitecture) -> float:
        proc = subprocess.run(
            self.command,
            shell=True,
            input=json.dumps(cand.to_dict(), sort_keys=True),
            capture_output=True,
            text=True,
            timeout=self.timeout,
            check=True,
        )
        return float(proc.stdout.strip().splitlines()[-1])


def reward_from_spec(spec: str) -> Callable[[CandidateArchitecture], float]:
    if spec == "builtin:neg-flops":
        return NegFlopsReward()
    if spec == "builtin:graph-score":
        return graph_score
    if spec.startswith("exec:"):
        return ExecReward(spec[len("exec:"):])
    raise ConfigError(f"unknown reward {spec!r}; use builtin:neg-flops, builtin:graph-score or exec:CMD")


# --- controllers -----------------------------------------------------------

def mutate(cand: CandidateArchitecture, cfg: SearchSpaceConfig, rng: np.random.Generator, max_tries: int = 100) -> CandidateArchitecture:
    """Resample one component of one block."""
    perm, conns, adjs = cand.permutation, list(cand.connections), cand.adjustments
    n_inter = len(cfg.intermediate_levels)
    components = ["permutation", "connections"] + (["adjustments"] if cfg.enable_adjustments else [])
    for _ in range(max_tries):
        what = components[rng.integers(len(components))]
        j = int(rng.integers(len(perm)))
        new_perm, new_conns, new_adjs = perm, list(conns), adjs
        if what == "permutation":
            group = range(n_inter) if j < n_inter else range(n_inter, len(perm))
            others = [k for k in group if k != j]
            if not others:
                continue
            k = others[rng.integers(len(others))]
            seq = list(zip(perm.labels, perm.levels))
            seq[j], seq[k] = seq[k], seq[j]
            new_perm = replace(perm, labels=tuple(l for l, _ in seq), levels=tuple(lv for _, lv in seq))
        elif what == "connections":
            pool = candidate_pool(j, perm.outputs[j], cfg.m, cfg.parent_window)
            a, b = rng.choice(len(pool), size=2, replace=False)
            new_conns[j] = tuple(sorted((pool[int(a)], pool[int(b)])))
        else:
            deltas, types = list(adjs.deltas), list(adjs.types)
            if j < n_inter and rng.integers(2):
                deltas[j] = int(cfg.level_deltas[rng.integers(len(cfg.level_deltas))])
            else:
                types[j] = cfg.block_types[rng.integers(len(cfg.block_types))]
            new_adjs = Adjustments(tuple(deltas), tuple(types))
        try:
            return assemble_candidate(new_perm, new_conns, new_adjs, cfg)
        except OrphanError:
            continue
    return sample_candidate(cfg, rng)


class RandomController:
    name = "random"

    def __init__(self, cfg: SearchSpaceConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng

    def propose(self) -> CandidateArchitecture:
        return sample_candidate(self.cfg, self.rng)

    def observe(self, cand: CandidateArchitecture, reward: float) -> None:
        pass


class EvolutionController:
    """Regularized (aging) evolution with tournament selection."""

    name = "evolution"

    def __init__(self, cfg: SearchSpaceConfig, rng: np.random.Generator, population_size: int = 64, tournament_size: int = 8):
        if not 1 <= tournament_size <= population_size:
            raise ConfigError("need 1 <= tournament_size <= population_size")
        self.cfg, self.rng = cfg, rng
        self.population_size = population_size
        self.tournament_size = tournament_size
        self.population: deque[tuple[CandidateArchitecture, float]] = deque()
        self.seen = 0

    def propose(self) -> CandidateArchitecture:
        if self.seen < self.population_size or not self.population:
            return sample_candidate(self.cfg, self.rng)
        idx = self.rng.choice(len(self.population), size=min(self.tournament_size, len(self.population)), replace=False)
        # ties go to the older individual
        parent = max(sorted(int(i) for i in idx), key=lambda i: self.population[i][1])
        return mutate(self.population[parent][0], self.cfg, self.rng)

    def observe(self, cand: CandidateArchitecture, reward: float) -> None:
        self.seen += 1
        self.population.append((cand, reward))
        if len(self.population) > self.population_size:
            self.population.popleft()


CONTROLLERS = {"random": RandomController, "evolution": EvolutionController}


@dataclass
class SearchRecord:
    index: int
    candidate: CandidateArchitecture
    reward: float
    error: str | None = None

    def to_json(self) -> str:
        reward = None if math.isinf(self.reward) else self.reward
        d = {"index": self.index, "reward": reward, "candidate": self.candidate.to_dict()}
        if self.error:
            d["error"] = self.error
        return json.dumps(d, sort_keys=True)


@dataclass
class SearchResult:
    best: CandidateArchitecture
    history: list[SearchRecord]

    def best_so_far(self) -> list[float]:
        out, cur = [], FAILED_REWARD
        for rec in self.history:
            cur = max(cur, rec.reward)
            out.append(cur)
        return out


def _evaluate(reward_fn, cand) -> tuple[float, str | None]:
    try:
        return float(reward_fn(cand)), None
    except Exception as exc:  # reward functions are user code; record and continue
        return FAILED_REWARD, f"{type(exc).__name__}: {exc}"


def run_search(
    cfg: SearchSpaceConfig,
    controller: str,
    reward_fn: Callable[[CandidateArchitecture], float],
    budget: int,
    seed: int,
    workers: int = 1,
    on_record: Callable[[SearchRecord], None] | None = None,
    **controller_kw,
) -> SearchResult:
    """Sample ``budget`` candidates; deterministic in (seed, controller, reward_fn).

    With ``workers > 1`` the random controller evaluates batches in threads;
    results are consumed in submission order, so the history does not depend
    on completion order.
    """
    if budget < 1:
        raise ConfigError("empty search: budget must be >= 1")
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller {controller!r}")
    rng = np.random.default_rng(seed)
    ctl = CONTROLLERS[controller](cfg, rng, **controller_kw)
    history: list[SearchRecord] = []
    best: SearchRecord | None = None

    def record(cand, reward, err):
        nonlocal best
        cand.reward = reward
        rec = SearchRecord(len(history), cand, reward, err)
        history.append(rec)
        ctl.observe(cand, reward)
        if best is None or reward > best.reward:
            best = rec
        if on_record:
            on_record(rec)

    batch = workers if (workers > 1 and controller == "random") else 1
    pool = ThreadPoolExecutor(max_workers=workers) if batch > 1 else None
    try:
        while len(history) < budget:
            cands = [ctl.propose() for _ in range(min(batch, budget - len(history)))]
            results = pool.map(lambda c: _evaluate(reward_fn, c), cands) if pool else [_evaluate(reward_fn, c) for c in cands]
            for cand, (reward, err) in zip(cands, results):
                record(cand, reward, err)
    finally:
        if pool:
            pool.shutdown()
    return SearchResult(best.candidate, history)
