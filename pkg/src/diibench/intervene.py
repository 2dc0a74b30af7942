"""Interchange interventions: 1D distributed (DII) and vanilla full replacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HookSite, Model, forward, forward_intervened
from .tokenizer import RegionAlignment

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Direction:
    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("direction must be a nonempty vector")
        if abs(np.linalg.norm(a) - 1.0) > UNIT_TOL:
            raise ValueError(f"direction must be unit norm, got ‖a‖={np.linalg.norm(a):.8g}")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def from_vector(cls, v) -> Direction:
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("cannot normalize a zero or non-finite vector")
        return cls(v / n)

    def __len__(self) -> int:
        return self.a.size


@dataclass(frozen=True)
class Vanilla:
    """Replace the whole activation with the source one."""


VANILLA = Vanilla()


def dii_apply(h_b, h_s, a) -> np.ndarray:
    """Swap the component of ``h_b`` along unit ``a`` for that of ``h_s``.

    Also accepts stacks of rows ``[..., d]``; ``a`` then broadcasts against them.
    """
    a = a.a if isinstance(a, Direction) else np.asarray(a)
    h_b, h_s = np.asarray(h_b), np.asarray(h_s)
    if h_b.shape != h_s.shape or a.ndim == 0 or h_b.ndim == 0 or a.shape[-1] != h_b.shape[-1]:
        raise ValueError(f"dimension mismatch: h_b {h_b.shape}, h_s {h_s.shape}, a {a.shape}")
    a = a.astype(h_b.dtype, copy=False) if h_b.dtype.kind == "f" else a
    if a.ndim == 1 and h_b.ndim == 1:
        return h_b + ((h_s @ a) - (h_b @ a)) * a
    coef = np.einsum("...d,...d->...", h_s, a) - np.einsum("...d,...d->...", h_b, a)
    return h_b + coef[..., None] * a


def replacement(kind, h_b, h_s) -> np.ndarray:
    if isinstance(kind, Vanilla):
        return np.array(h_s)
    return dii_apply(h_b, h_s, kind)


def run_intervened(
    model: Model,
    ids_b,
    ids_s,
    alignment: RegionAlignment,
    layer: int,
    region: str,
    kind,
    labels: tuple[int, int],
    cache_b=None,
    cache_s=None,
) -> tuple[float, float]:
    """(log p(y_b), log p(y_s)) at the final base position under the intervention.

    ``labels`` are the token ids of (y_b, y_s). The source activation is read at
    the source's own last token of ``region``; the base is patched at the base's.
    """
    logp = intervened_logprobs(model, ids_b, ids_s, alignment, layer, region, kind, cache_b, cache_s)
    return float(logp[labels[0]]), float(logp[labels[1]])


def intervened_logprobs(model, ids_b, ids_s, alignment, layer, region, kind, cache_b=None, cache_s=None):
    if cache_b is None:
        _, cache_b = forward(model, ids_b)
    if cache_s is None:
        _, cache_s = forward(model, ids_s)
    pb, ps = alignment.base_index(region), alignment.source_index(region)
    h_b = cache_b[layer, pb]
    h_s = cache_s[layer, ps]
    rep = replacement(kind, h_b, h_s)
    return forward_intervened(model, ids_b, HookSite(layer, pb), rep, cache=cache_b)
