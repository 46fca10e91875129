"""Flat layer records: the unit both the cost model and the executor consume."""

from __future__ import annotations

from dataclasses import dataclass

# op kinds: conv (dense k x k), dwconv (depthwise, cout == cin), fc, deconv
# (transposed conv; sites are given at its input resolution)
OPS = ("conv", "dwconv", "fc", "deconv")


@dataclass(frozen=True)
class Layer:
    owner: str
    index: int
    op: str
    k: int
    cin: int
    cout: int
    stride: int = 1
    bias: bool = False
    norm: bool = True
    role: str = ""
    # (height, width, count) of every place the weights are applied
    sites: tuple[tuple[int, int, int], ...] = ()

    @property
    def key(self) -> tuple[str, int]:
        return (self.owner, self.index)

    @property
    def weight_count(self) -> int:
        if self.op == "dwconv":
            return self.k * self.k * self.cin
        return self.k * self.k * self.cin * self.cout

    @property
    def params(self) -> int:
        n = self.weight_count
        if self.bias:
            n += self.cout
        if self.norm:
            n += 2 * self.cout
        return n

    @property
    def madds(self) -> int:
        positions = sum(h * w * c for h, w, c in self.sites)
        return positions * self.weight_count

    def weight_shape(self) -> tuple[int, ...]:
        if self.op == "dwconv":
            return (self.k, self.k, self.cin)
        if self.op == "fc":
            return (self.cin, self.cout)
        return (self.k, self.k, self.cin, self.cout)


def site(h: int, w: int | None = None, count: int = 1) -> tuple[tuple[int, int, int], ...]:
    return ((h, h if w is None else w, count),)
