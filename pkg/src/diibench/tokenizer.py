"""Tokenizers (whitespace lookup and byte-level BPE) and region-to-token alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import regex

from .taskgen import EvalExample, TaskTemplate, join_regions

# GPT-2 style pre-tokenization
_BPE_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)
_LOOKUP_PATTERN = regex.compile(r"\s?\S+")


class TokenizerError(ValueError):
    pass


class UnknownTokenError(TokenizerError):
    pass


class MultiTokenLabelError(TokenizerError):
    pass


class BoundaryMismatchError(TokenizerError):
    def __init__(self, region: str, msg: str):
        super().__init__(f"region {region!r}: {msg}")
        self.region = region


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """The standard reversible byte -> printable-character map used by byte-level BPE."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


@dataclass(frozen=True)
class RegionAlignment:
    regions: tuple[str, ...]
    base_last: tuple[int, ...]
    source_last: tuple[int, ...]
    base_len: int
    source_len: int

    def base_index(self, region: str) -> int:
        return self.base_last[self.regions.index(region)]

    def source_index(self, region: str) -> int:
        return self.source_last[self.regions.index(region)]


class Tokenizer:
    """Either a whitespace lookup tokenizer or a byte-level BPE tokenizer.

    Lookup mode splits text into units of an optional single leading whitespace
    character followed by non-space characters; each unit must be in the vocab.
    """

    def __init__(self, vocab: dict[str, int], mode: str = "lookup", merges: Sequence[tuple[str, str]] = ()):
        if mode not in ("lookup", "byte-level-bpe"):
            raise TokenizerError(f"unknown tokenizer mode {mode!r}")
        ids = sorted(vocab.values())
        if ids != list(range(len(ids))):
            raise TokenizerError("vocab ids must be dense in [0, |vocab|)")
        self.mode = mode
        self.vocab = dict(vocab)
        self.inverse = {i: t for t, i in self.vocab.items()}
        self.merges = tuple(tuple(m) for m in merges)
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._byte_map = bytes_to_unicode()
        self._byte_unmap = {c: b for b, c in self._byte_map.items()}
        self._bpe_cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    # construction helpers

    @classmethod
    def from_vocab_file(cls, path: str | Path) -> Tokenizer:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        vocab: dict[str, int] = {}
        for i, tok in enumerate(lines):
            if tok in vocab:
                raise TokenizerError(f"{path}:{i + 1}: duplicate token {tok!r}")
            vocab[tok] = i
        return cls(vocab, "lookup")

    @classmethod
    def from_bpe_files(cls, vocab_json: str | Path, merges_txt: str | Path) -> Tokenizer:
        vocab = json.loads(Path(vocab_json).read_text(encoding="utf-8"))
        merges = []
        for line in Path(merges_txt).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(vocab, "byte-level-bpe", merges)

    @classmethod
    def from_tokenizer_json(cls, path: str | Path) -> Tokenizer:
        """Read the vocab and merges of a HuggingFace ``tokenizer.json`` BPE model."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        model = doc["model"]
        vocab = dict(model["vocab"])
        for added in doc.get("added_tokens", []):
            vocab.setdefault(added["content"], added["id"])
        merges = [tuple(m.split(" ")) if isinstance(m, str) else tuple(m) for m in model["merges"]]
        return cls(_densify(vocab), "byte-level-bpe", merges)

    @classmethod
    def from_dir(cls, path: str | Path) -> Tokenizer:
        p = Path(path)
        if (p / "vocab.txt").exists():
            return cls.from_vocab_file(p / "vocab.txt")
        if (p / "vocab.json").exists() and (p / "merges.txt").exists():
            return cls.from_bpe_files(p / "vocab.json", p / "merges.txt")
        if (p / "tokenizer.json").exists():
            return cls.from_tokenizer_json(p / "tokenizer.json")
        raise TokenizerError(f"{p}: no vocab.txt, vocab.json+merges.txt or tokenizer.json")

    def save_vocab_file(self, path: str | Path) -> None:
        if self.mode != "lookup":
            raise TokenizerError("only lookup vocabularies are saved as vocab.txt")
        toks = [self.inverse[i] for i in range(len(self))]
        Path(path).write_text("".join(t + "\n" for t in toks), encoding="utf-8")

    # encoding

    def _pieces(self, text: str) -> list[tuple[int, int]]:
        """Character spans of the pre-tokenized chunks."""
        pat = _LOOKUP_PATTERN if self.mode == "lookup" else _BPE_PATTERN
        spans = [m.span() for m in pat.finditer(text)]
        covered = sum(e - s for s, e in spans)
        if covered != len(text):
            raise TokenizerError(f"text {text!r} is not fully covered by pre-tokenization")
        return spans

    def _bpe(self, chunk: str) -> tuple[str, ...]:
        hit = self._bpe_cache.get(chunk)
        if hit is not None:
            return hit
        word = [self._byte_map[b] for b in chunk.encode("utf-8")]
        while len(word) > 1:
            best, best_rank = None, None
            for i in range(len(word) - 1):
                r = self._ranks.get((word[i], word[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            a, b = word[best], word[best + 1]
            merged = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == a and word[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        out = tuple(word)
        self._bpe_cache[chunk] = out
        return out

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids plus the character span each token covers."""
        if not text:
            raise TokenizerError("cannot encode empty text")
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        for s, e in self._pieces(text):
            chunk = text[s:e]
            if self.mode == "lookup":
                if chunk not in self.vocab:
                    raise UnknownTokenError(f"unknown token {chunk!r}")
                ids.append(self.vocab[chunk])
                spans.append((s, e))
                continue
            pos = s
            nbytes = 0
            raw = chunk.encode("utf-8")
            for piece in self._bpe(chunk):
                if piece not in self.vocab:
                    raise UnknownTokenError(f"bpe piece {piece!r} not in vocab")
                ids.append(self.vocab[piece])
                nbytes += len(piece)
                # map byte offset back to character offset (mid-character pieces round down)
                end = s + len(raw[:nbytes].decode("utf-8", errors="ignore"))
                spans.append((pos, end))
                pos = end
        return ids, spans

    def encode(self, text: str) -> list[int]:
        return self.encode_with_offsets(text)[0]

    def decode(self, ids: Iterable[int]) -> str:
        toks = [self.inverse[int(i)] for i in ids]
        if self.mode == "lookup":
            return "".join(toks)
        data = bytes(self._byte_unmap[c] for c in "".join(toks))
        return data.decode("utf-8", errors="replace")


def _densify(vocab: dict[str, int]) -> dict[str, int]:
    # tokenizer.json added tokens can leave holes; fill them with placeholders
    n = max(vocab.values()) + 1
    taken = set(vocab.values())
    for i in range(n):
        if i not in taken:
            vocab[f"<|unused_{i}|>"] = i
    return vocab


def encode(tok: Tokenizer, text: str) -> list[int]:
    return tok.encode(text)


def label_token_id(tok: Tokenizer, label: str) -> int:
    ids = tok.encode(label)
    if len(ids) != 1:
        pieces = [tok.inverse[i] for i in ids]
        raise MultiTokenLabelError(f"label {label!r} encodes to {len(ids)} tokens {pieces}")
    return ids[0]


def _region_last_tokens(tok: Tokenizer, parts: Sequence[str], names: Sequence[str]) -> tuple[list[int], tuple[int, ...]]:
    text = join_regions(parts)
    ids, spans = tok.encode_with_offsets(text)
    ends = {e: i for i, (_, e) in enumerate(spans)}
    last = []
    offset = 0
    for k, (name, part) in enumerate(zip(names, parts)):
        if k:
            offset += 1
        offset += len(part)
        if offset not in ends:
            raise BoundaryMismatchError(name, f"text ends mid-token in {text!r}")
        last.append(ends[offset])
    if len(set(last)) != len(last):
        raise BoundaryMismatchError(names[last.index(max(last))], "region has no tokens of its own")
    return ids, tuple(last)


def align_regions(tok: Tokenizer, example: EvalExample, region_names: Sequence[str]) -> RegionAlignment:
    """Index of the last token of every region, separately for base and source."""
    b_ids, b_last = _region_last_tokens(tok, example.base_regions, region_names)
    s_ids, s_last = _region_last_tokens(tok, example.source_regions, region_names)
    return RegionAlignment(
        regions=tuple(region_names),
        base_last=b_last,
        source_last=s_last,
        base_len=len(b_ids),
        source_len=len(s_ids),
    )


def template_units(template: TaskTemplate) -> list[str]:
    """Every lookup unit a template can produce, including labels, in first-seen order."""
    seen: dict[str, None] = {}

    def add_text(text: str, first: bool) -> None:
        s = text if first else " " + text
        for m in _LOOKUP_PATTERN.finditer(s):
            seen.setdefault(m.group(0))

    for k, r in enumerate(template.regions):
        if r.kind == "constant":
            add_text(r.text, k == 0)
        elif r.kind == "variable":
            for o in r.options:
                add_text(o, k == 0)
        else:
            for ty in template.types:
                for o in r.options[ty]:
                    add_text(o, k == 0)
    for ty in template.types:
        for lab in template.label_options[ty]:
            seen.setdefault(lab)
    for lab in template.control_labels:
        seen.setdefault(lab)
    return list(seen)


def build_lookup_tokenizer(templates: Iterable[TaskTemplate], extra: Iterable[str] = ()) -> Tokenizer:
    vocab: dict[str, int] = {}
    for t in templates:
        for u in template_units(t):
            vocab.setdefault(u, len(vocab))
    for u in extra:
        vocab.setdefault(u, len(vocab))
    return Tokenizer(vocab, "lookup")
