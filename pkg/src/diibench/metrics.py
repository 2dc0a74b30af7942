"""Causal-effect metrics: log odds-ratio, averages, overall odds, selectivity, accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoded import EncodedPair, ForwardMemo


@dataclass(frozen=True)
class OddsGrid:
    values: np.ndarray  # [layers, regions]
    layers: tuple[int, ...]
    regions: tuple[str, ...]
    n_eval: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape != (len(self.layers), len(self.regions)):
            raise ValueError(f"grid shape {v.shape} does not match {len(self.layers)} layers × {len(self.regions)} regions")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid entries must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, values, regions: Sequence[str] | None = None, n_eval: int = 0) -> OddsGrid:
        v = np.asarray(values, dtype=np.float64)
        regions = tuple(regions) if regions is not None else tuple(f"r{j}" for j in range(v.shape[1]))
        return cls(v, tuple(range(v.shape[0])), regions, n_eval)


@dataclass(frozen=True)
class BenchmarkRecord:
    task: str
    method: str
    overall_odds: float
    selectivity: float
    accuracy: float
    seed: int
    checkpoint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


def odds_ratio(logp_orig: tuple[float, float], logp_intv: tuple[float, float]) -> float:
    """log[p(y_b|b)/p(y_s|b) · p*(y_s|b,s)/p*(y_b|b,s)]; both pairs ordered (y_b, y_s)."""
    ob, os_ = logp_orig
    ib, is_ = logp_intv
    return (float(ob) - float(os_)) + (float(is_) - float(ib))


def avg_odds(per_example: Iterable[float]) -> float:
    vals = [float(x) for x in per_example]
    if not vals:
        raise ValueError("average over an empty evaluation set")
    return math.fsum(vals) / len(vals)


def overall_odds(grid: OddsGrid | np.ndarray) -> float:
    """Mean over layers of the best region's average odds."""
    v = grid.values if isinstance(grid, OddsGrid) else np.asarray(grid, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty grid")
    return math.fsum(v.max(axis=1)) / v.shape[0]


def selectivity(task_grid: OddsGrid | np.ndarray, control_grid: OddsGrid | np.ndarray) -> float:
    t = task_grid.values if isinstance(task_grid, OddsGrid) else np.asarray(task_grid, dtype=np.float64)
    c = control_grid.values if isinstance(control_grid, OddsGrid) else np.asarray(control_grid, dtype=np.float64)
    if t.shape != c.shape:
        raise ValueError(f"grid shapes differ: {t.shape} vs {c.shape}")
    return overall_odds(t - c)


def task_accuracy(memo: ForwardMemo, pairs: Sequence[EncodedPair]) -> float:
    """Share of examples with p(y_b|b) > p(y_s|b); ties count as wrong."""
    if not pairs:
        raise ValueError("accuracy over an empty evaluation set")
    correct = 0
    for p in pairs:
        logp, _ = memo.get(p.ids_b)
        correct += bool(logp[p.y_b] > logp[p.y_s])
    return correct / len(pairs)
