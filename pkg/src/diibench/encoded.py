"""Tokenized examples and a memo of plain forward passes."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import Model, forward
from .taskgen import EvalExample, TaskTemplate
from .tokenizer import RegionAlignment, Tokenizer, align_regions, label_token_id


@dataclass(frozen=True)
class EncodedPair:
    example: EvalExample
    ids_b: tuple[int, ...]
    ids_s: tuple[int, ...]
    alignment: RegionAlignment
    y_b: int
    y_s: int


def encode_pair(tok: Tokenizer, template: TaskTemplate, e: EvalExample) -> EncodedPair:
    return EncodedPair(
        example=e,
        ids_b=tuple(tok.encode(e.base)),
        ids_s=tuple(tok.encode(e.source)),
        alignment=align_regions(tok, e, template.region_names),
        y_b=label_token_id(tok, e.base_label),
        y_s=label_token_id(tok, e.source_label),
    )


def encode_examples(tok: Tokenizer, template: TaskTemplate, examples: Iterable[EvalExample]) -> list[EncodedPair]:
    return [encode_pair(tok, template, e) for e in examples]


class ForwardMemo:
    """Plain forward results keyed by token ids; shared read-mostly across workers."""

    def __init__(self, model: Model):
        self.model = model
        self._store: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()

    def get(self, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(ids)
        hit = self._store.get(key)
        if hit is None:
            logp, cache = forward(self.model, key)
            logp.setflags(write=False)
            cache.setflags(write=False)
            with self._lock:
                hit = self._store.setdefault(key, (logp, cache))
        return hit

    def warm(self, pairs: Iterable[EncodedPair]) -> None:
        for p in pairs:
            self.get(p.ids_b)
            self.get(p.ids_s)
