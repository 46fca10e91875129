"""Published cost rows (multiply-adds in billions, params in millions) and tolerance checks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

GOLDEN_DIR = Path(__file__).with_name("goldens")


@dataclass(frozen=True)
class GoldenRow:
    table: str
    head: str
    model: str
    resolution: int
    madds: float
    params: float | None
    tolerance: float


@dataclass(frozen=True)
class GoldenCheck:
    row: GoldenRow
    madds: int
    params: int

    @property
    def madds_delta(self) -> float:
        return self.madds / self.row.madds - 1

    @property
    def params_delta(self) -> float | None:
        return None if self.row.params is None else self.params / self.row.params - 1

    @property
    def ok(self) -> bool:
        deltas = [self.madds_delta] + ([] if self.params_delta is None else [self.params_delta])
        return all(abs(d) <= self.row.tolerance for d in deltas)

    def to_dict(self) -> dict:
        return {
            "table": self.row.table,
            "model": self.row.model,
            "resolution": self.row.resolution,
            "expected_madds": self.row.madds,
            "expected_params": self.row.params,
            "madds": self.madds,
            "params": self.params,
            "madds_delta": self.madds_delta,
            "params_delta": self.params_delta,
            "tolerance": self.row.tolerance,
            "ok": self.ok,
        }

    def summary(self) -> str:
        p = "n/a" if self.params_delta is None else f"{self.params_delta:+.2%}"
        expected_p = "n/a" if self.row.params is None else f"{self.row.params / 1e6:.2f}M"
        verdict = "within" if self.ok else "OUTSIDE"
        return (
            f"{self.row.table} {self.row.model}@{self.row.resolution}: "
            f"madds {self.madds / 1e9:.2f}B vs {self.row.madds / 1e9:.2f}B ({self.madds_delta:+.2%}), "
            f"params {self.params / 1e6:.2f}M vs {expected_p} ({p}); {verdict} ±{self.row.tolerance:.0%}"
        )


def available() -> list[str]:
    return sorted(p.stem for p in GOLDEN_DIR.glob("*.json"))


def load_table(name: str) -> list[GoldenRow]:
    path = GOLDEN_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"unknown golden table {name!r}; choose from {available()}")
    doc = json.loads(path.read_text())
    return [
        GoldenRow(
            table=doc["table"],
            head=doc["head"],
            model=r["model"],
            resolution=int(r["resolution"]),
            madds=float(r["madds_b"]) * 1e9,
            params=None if r["params_m"] is None else float(r["params_m"]) * 1e6,
            tolerance=float(doc["tolerance"]),
        )
        for r in doc["rows"]
    ]


def find_row(name: str, model: str, resolution: int | None) -> GoldenRow:
    rows = [r for r in load_table(name) if r.model == model]
    if resolution is not None:
        rows = [r for r in rows if r.resolution == resolution]
    if not rows:
        raise ConfigError(f"{name} has no row for {model}" + (f" at {resolution}" if resolution else ""))
    return rows[0]


def check(row: GoldenRow) -> GoldenCheck:
    from .cost_model import count_model
    from .model_zoo import build_model

    report = count_model(build_model(row.model, row.head), row.resolution)
    return GoldenCheck(row, report.madds, report.params)
