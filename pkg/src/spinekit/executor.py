"""Deterministic numpy forward pass over the cost model's layer inventory.

The executor runs exactly the layers ``cost_model.model_layers`` lists, so a
shape or wiring mistake in either shows up as a mismatch here. Convolutions
are direct: one matmul per kernel tap over a zero-padded input. Normalization
runs in its identity mode (scale 1, shift 0) and biases are zero, which keeps
forward a pure function of (model, seed, input).

Tensors are (H, W, C) float32 arrays.
"""

from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, NonFiniteActivation, ShapeError
from .graph_ir import OUTPUT_LEVELS, BlockKind, infer_shapes, level_resolution
from .layers import Layer
from .model_zoo import ModelWithHead
from .resampling import CONV_S2, DW_CONV_S2, MAXPOOL, PROJ, PROJ_TARGET, UPSAMPLE, plan_edge

DTYPE = np.float32


# --- weights ---------------------------------------------------------------

def _philox_key(seed: int, owner: str, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}\x00{owner}\x00{index}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def fan_in(layer: Layer) -> int:
    if layer.op == "dwconv":
        return layer.k * layer.k
    return layer.k * layer.k * layer.cin


class WeightStore(Mapping):
    """Read-only map (owner, index) -> weight tensor.

    Weights come from a counter-based generator keyed by (seed, owner, index),
    so each one is produced on demand and never stored; two stores with the
    same seed and layer set are indistinguishable.
    """

    def __init__(self, layers: list[Layer], seed: int):
        self.seed = int(seed)
        self._layers = {l.key: l for l in layers}

    def __getitem__(self, key) -> np.ndarray:
        layer = self._layers[key]
        rng = np.random.Generator(np.random.Philox(key=_philox_key(self.seed, *key)))
        w = rng.standard_normal(layer.weight_shape(), dtype=np.float32)
        return w * DTYPE(1.0 / np.sqrt(fan_in(layer)))

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def layer(self, key) -> Layer:
        return self._layers[key]


def init_weights(m: ModelWithHead, seed: int, resolution: int = 256) -> WeightStore:
    from .cost_model import model_layers

    return WeightStore(model_layers(m, resolution), seed)


# --- primitive ops ---------------------------------------------------------

def _out_size(n: int, stride: int) -> int:
    return n // stride if stride > 1 else n


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Dense k x k conv, zero 'same' padding; stride s keeps every s-th position."""
    k = w.shape[0]
    h, wd, _ = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output collapses to {ho}x{wo}")
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((ho, wo, w.shape[3]), dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            patch = xp[dy : dy + stride * ho : stride, dx : dx + stride * wo : stride, :]
            out += patch @ w[dy, dx]
    return out


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    k = w.shape[0]
    h, wd, c = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise conv output collapses to {ho}x{wo}")
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((ho, wo, c), dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            out += xp[dy : dy + stride * ho : stride, dx : dx + stride * wo : stride, :] * w[dy, dx]
    return out


def max_pool(x: np.ndarray, k: int = 3, stride: int = 2) -> np.ndarray:
    h, wd, c = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max-pool output collapses to {ho}x{wo}")
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=-np.inf)
    out = np.full((ho, wo, c), -np.inf, dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            np.maximum(out, xp[dy : dy + stride * ho : stride, dx : dx + stride * wo : stride, :], out=out)
    return out


def upsample_nearest(x: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * x.shape[0]) // h
    cols = (np.arange(w) * x.shape[1]) // w
    return x[rows][:, cols]


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3), dtype=DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def swish(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1) + np.exp(-x))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return DTYPE(1) / (DTYPE(1) + np.exp(-x))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - np.max(z)
    e = np.exp(z)
    return e / e.sum()


# --- model evaluation ------------------------------------------------------

class _Runner:
    def __init__(self, m: ModelWithHead, w: WeightStore, activation: str):
        if activation not in ("relu", "swish"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.m, self.g, self.w = m, m.graph, w
        self.act = relu if activation == "relu" else swish
        self.by_owner: dict[str, list[Layer]] = defaultdict(list)
        for key in w:
            layer = w.layer(key)
            self.by_owner[layer.owner].append(layer)
        for layers in self.by_owner.values():
            layers.sort(key=lambda l: l.index)

    def apply(self, layer: Layer, x: np.ndarray) -> np.ndarray:
        wt = self.w[layer.key]
        if layer.op == "conv":
            return conv2d(x, wt, layer.stride)
        if layer.op == "dwconv":
            return depthwise_conv2d(x, wt, layer.stride)
        if layer.op == "fc":
            return x @ wt
        raise ConfigError(f"layer op {layer.op!r} is not executable")

    def check(self, x: np.ndarray, who: str) -> np.ndarray:
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivation(f"non-finite activation in {who}")
        return x

    def block(self, bid: str, kind: BlockKind, x: np.ndarray) -> np.ndarray:
        layers = self.by_owner[bid]
        starts = [i for i, l in enumerate(layers) if l.role in ("conv1", "expand")] + [len(layers)]
        for a, b in zip(starts, starts[1:]):
            x = self._copy(kind, {l.role: l for l in layers[a:b]}, x)
        return x

    def _copy(self, kind: BlockKind, L: dict[str, Layer], x: np.ndarray) -> np.ndarray:
        act = self.act
        if kind is BlockKind.MBCONV:
            y = act(self.apply(L["expand"], x))
            y = act(self.apply(L["depthwise"], y))
            s = act(self.apply(L["se_reduce"], y.mean(axis=(0, 1))))
            y = y * sigmoid(self.apply(L["se_expand"], s))
            y = self.apply(L["project"], y)
            return y + x if y.shape == x.shape else y
        if kind is BlockKind.BOTTLENECK:
            y = act(self.apply(L["conv1"], x))
            y = act(self.apply(L["conv2"], y))
            y = self.apply(L["conv3"], y)
        else:
            y = act(self.apply(L["conv1"], x))
            y = self.apply(L["conv2"], y)
        short = self.apply(L["shortcut"], x) if "shortcut" in L else x
        if short.shape != y.shape:
            raise ShapeError(f"shortcut shape {short.shape} does not match residual branch {y.shape}")
        return act(y + short)

    def resample(self, owner: str, plan, x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
        layers = iter(self.by_owner.get(owner, []))
        for s in plan.stages:
            if s.op == PROJ:
                x = self.act(self.apply(next(layers), x))
            elif s.op == UPSAMPLE:
                x = upsample_nearest(x, *target_hw)
            elif s.op in (CONV_S2, DW_CONV_S2):
                x = self.act(self.apply(next(layers), x))
            elif s.op == MAXPOOL:
                x = max_pool(x)
            elif s.op == PROJ_TARGET:
                x = self.apply(next(layers), x)
        return x

    def run(self, x: np.ndarray) -> dict[str, np.ndarray]:
        g = self.g
        sc = g.stem_conv
        out: dict[str, np.ndarray] = {}
        y = self.act(self.apply(self.by_owner["stem"][0], x))
        if sc.maxpool:
            y = max_pool(y)
        self.check(y, "stem conv")
        order = {b.id: b.ordering for b in g.blocks}
        for b in g.stem:
            y = self.check(self.block(b.id, b.kind, y), f"block {b.id}")
            out[b.id] = y
        for b in sorted(g.permuted, key=lambda b: b.ordering):
            incoming = sorted(g.parents(b.id), key=lambda e: (order[e.parent], e.kind))
            r = level_resolution(x.shape[0], b.level)
            total = None
            for e in incoming:
                z = self.resample(f"{e.parent}->{e.child}", plan_edge(g, e), out[e.parent], (r, r))
                total = z if total is None else total + z
            if total is None:
                raise ShapeError(f"block {b.id} has no inputs")
            y = self.block(b.id, b.kind, self.act(total))
            out[b.id] = self.check(y, f"block {b.id}")
        if g.neck == "spine":
            for lv, b in sorted(g.output_blocks.items()):
                out[f"P{lv}"] = self.check(self.act(self.apply(self.by_owner[f"P{lv}"][0], out[b.id])), f"P{lv}")
        elif g.neck == "fpn":
            out.update(self._fpn(out))
        return out

    def _fpn(self, feats: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        last = {}
        for b in self.g.stem:
            last[b.level] = feats[b.id]
        L = {l.role: l for l in self.by_owner["fpn"]}
        lat = {lv: self.apply(L[f"lateral{lv}"], last[lv]) for lv in (3, 4, 5)}
        for lv in (4, 3):
            h, w, _ = lat[lv].shape
            lat[lv] = lat[lv] + upsample_nearest(lat[lv + 1], h, w)
        p = {f"P{lv}": self.apply(L[f"output{lv}"], lat[lv]) for lv in (3, 4, 5)}
        p["P6"] = self.apply(L["output6"], p["P5"])
        p["P7"] = self.apply(L["output7"], relu(p["P6"]))
        for k, v in p.items():
            self.check(v, k)
        return p


def _input_check(m: ModelWithHead, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"expected a square (H, W, 3) input, got {x.shape}")


def forward_all(m: ModelWithHead, w: WeightStore, x: np.ndarray, activation: str = "relu") -> dict[str, np.ndarray]:
    """Every block output plus the pyramid entries."""
    _input_check(m, x)
    infer_shapes(m.graph, x.shape[0], relaxed=True)
    return _Runner(m, w, activation).run(np.asarray(x, dtype=DTYPE))


def forward(m: ModelWithHead, w: WeightStore, x: np.ndarray, activation: str = "relu") -> dict[str, np.ndarray]:
    """Feature pyramid {"P3": ..., "P7": ...}."""
    if m.graph.neck == "none":
        raise ConfigError(f"{m.name} has no feature pyramid")
    feats = forward_all(m, w, x, activation)
    return {f"P{lv}": feats[f"P{lv}"] for lv in OUTPUT_LEVELS}


def pool_pyramid(pyramid: Mapping[str, np.ndarray]) -> np.ndarray:
    """Upsample P4..P7 onto P3, average the five maps, global-average-pool."""
    p3 = pyramid["P3"]
    widths = {k: v.shape[2] for k, v in pyramid.items()}
    if len(set(widths.values())) != 1:
        raise ShapeError(f"pyramid channel widths differ: {widths}")
    h, w, _ = p3.shape
    acc = np.zeros(p3.shape, np.float64)
    for lv in OUTPUT_LEVELS:
        acc += upsample_nearest(pyramid[f"P{lv}"], h, w)
    return (acc.mean(axis=(0, 1)) / len(OUTPUT_LEVELS)).astype(DTYPE)


def forward_classifier(m: ModelWithHead, w: WeightStore, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Class probabilities."""
    if m.head is None or m.head.kind != "classifier":
        raise ConfigError(f"{m.name} has no classifier head")
    if m.graph.neck == "none":
        feats = forward_all(m, w, x, activation)
        vec = feats[m.graph.stem[-1].id].mean(axis=(0, 1), dtype=np.float64).astype(DTYPE)
    else:
        vec = pool_pyramid(forward(m, w, x, activation))
    return softmax(vec @ w[("head", 0)])


# --- binary tensor dump ----------------------------------------------------
# layout: b"SPTN", uint32 ndim, ndim x uint32 dims, float32 payload; all little-endian

MAGIC = b"SPTN"


def dump_tensor(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    return MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape) + x.tobytes()


def load_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not a tensor dump (bad magic)")
    (ndim,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    start = 8 + 4 * ndim
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(dims).copy()


def write_tensors(directory: Path, tensors: Mapping[str, np.ndarray]) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, t in sorted(tensors.items()):
        path = directory / f"{name}.bin"
        path.write_bytes(dump_tensor(t))
        paths.append(path)
    return paths


def random_input(resolution: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((resolution, resolution, 3)).astype(DTYPE)
