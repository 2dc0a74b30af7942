import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diibench.taskgen import EvalExample, build_dataset, sample_pair
from diibench.tokenizer import (
    BoundaryMismatchError,
    MultiTokenLabelError,
    Tokenizer,
    TokenizerError,
    UnknownTokenError,
    align_regions,
    bytes_to_unicode,
    label_token_id,
)

# 5 merges; Ġ is the printable stand-in for the space byte
TOY_MERGES = [("g", "o"), ("Ġ", "w"), ("x", "y"), ("q", "r"), ("y", "z")]


def toy_bpe(extra_merges=()):
    alphabet = list(bytes_to_unicode().values())
    vocab = {c: i for i, c in enumerate(alphabet)}
    merges = TOY_MERGES + list(extra_merges)
    for a, b in merges:
        vocab.setdefault(a + b, len(vocab))
    return Tokenizer(vocab, "byte-level-bpe", merges)


def test_lookup_encode_direct():
    tok = Tokenizer({"The": 0, " author": 1, " is": 2})
    assert tok.encode("The author") == [0, 1]
    assert tok.decode([0, 1, 2]) == "The author is"


def test_lookup_errors():
    tok = Tokenizer({"The": 0, " author": 1})
    with pytest.raises(TokenizerError):
        tok.encode("")
    with pytest.raises(UnknownTokenError):
        tok.encode("The senator")


def test_dense_ids_required():
    with pytest.raises(TokenizerError):
        Tokenizer({"a": 0, "b": 2})


def test_bpe_single_merge():
    tok = Tokenizer({"h": 0, "e": 1, "he": 2}, "byte-level-bpe", [("h", "e")])
    assert tok.encode("he") == [2]


def test_bpe_hand_simulation():
    tok = toy_bpe()
    # "go" -> (g,o) rank 0 -> "go"
    # " wxyz" -> Ġ w x y z -> (Ġ,w) rank 1 -> Ġw x y z -> (x,y) rank 2 beats (y,z) rank 4 -> Ġw xy z
    ids = tok.encode("go wxyz")
    assert [tok.inverse[i] for i in ids] == ["go", "Ġw", "xy", "z"]
    assert tok.decode(ids) == "go wxyz"


def test_bpe_alignment_points_at_last_piece():
    tok = toy_bpe()
    e = EvalExample(("go", "wxyz"), ("go", "wxyz"), " x", " y", ("a", "b"))
    al = align_regions(tok, e, ("r1", "r2"))
    assert al.base_last == (0, 3)
    assert al.base_len == 4


def test_region_ending_mid_token_names_region():
    class PhraseLookup(Tokenizer):
        # one unit per text: simulates a vocabulary with multi-word tokens
        def _pieces(self, text):
            return [(0, len(text))]

    tok = PhraseLookup({"The author": 0})
    e = EvalExample(("The", "author"), ("The", "author"), " x", " y", ("a", "b"))
    with pytest.raises(BoundaryMismatchError) as info:
        align_regions(tok, e, ("det", "noun"))
    assert info.value.region == "det"


def test_label_token_id(tok):
    assert label_token_id(tok, " is") == tok.vocab[" is"]
    assert label_token_id(tok, " are") == tok.vocab[" are"]
    with pytest.raises(MultiTokenLabelError):
        label_token_id(toy_bpe(), " antidisestablishmentarianism")


def test_word_level_alignment_indices(tok):
    e = EvalExample(("The", "author", "near", "the", "senators"), ("The", "authors", "near", "the", "senators"), " is", " are", ("sing", "plur"))
    al = align_regions(tok, e, ("det", "np_subj", "prep", "prep_det", "prep_np"))
    assert al.base_last == (0, 1, 2, 3, 4)
    two = EvalExample(("The author", "near the senators"), ("The authors", "near the senators"), " is", " are", ("s", "p"))
    assert align_regions(tok, two, ("a", "b")).base_last == (1, 4)


def test_multiword_region_lengths_differ_between_base_and_source(tok, agr):
    rng = np.random.default_rng(0)
    for _ in range(200):
        e = sample_pair(agr, rng)
        al = align_regions(tok, e, agr.region_names)
        assert len(al.base_last) == len(al.source_last) == len(agr.region_names)
        assert list(al.base_last) == sorted(set(al.base_last))
        assert al.base_last[-1] == al.base_len - 1


def test_roundtrip_and_alignment_consistency(tok, bundled_templates):
    for t in bundled_templates:
        d = build_dataset(t, 500, 1, seed=1)
        for e in d.train:
            for regions, text in ((e.base_regions, e.base), (e.source_regions, e.source)):
                ids = tok.encode(text)
                assert tok.decode(ids) == text
            al = align_regions(tok, e, t.region_names)
            ids = tok.encode(e.base)
            for k, (name, part) in enumerate(zip(t.region_names, e.base_regions)):
                piece = tok.decode([ids[al.base_index(name)]])
                assert (part if k == 0 else " " + part).endswith(piece)


def test_bpe_files_and_tokenizer_json(tmp_path):
    tok = toy_bpe()
    (tmp_path / "vocab.json").write_text(json.dumps(tok.vocab))
    (tmp_path / "merges.txt").write_text("#version: 0.2\n" + "".join(f"{a} {b}\n" for a, b in tok.merges))
    again = Tokenizer.from_bpe_files(tmp_path / "vocab.json", tmp_path / "merges.txt")
    assert again.encode("go wxyz qr") == tok.encode("go wxyz qr")
    doc = {"model": {"type": "BPE", "vocab": tok.vocab, "merges": [f"{a} {b}" for a, b in tok.merges]},
           "added_tokens": [{"id": len(tok.vocab) + 1, "content": "<|endoftext|>"}]}
    (tmp_path / "tokenizer.json").write_text(json.dumps(doc))
    tj = Tokenizer.from_tokenizer_json(tmp_path / "tokenizer.json")
    assert tj.encode("go wxyz") == tok.encode("go wxyz")
    assert len(tj) == len(tok.vocab) + 2  # the hole is filled


def test_vocab_file_roundtrip(tmp_path, tok):
    tok.save_vocab_file(tmp_path / "vocab.txt")
    again = Tokenizer.from_dir(tmp_path)
    assert again.vocab == tok.vocab


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40))
def test_bpe_roundtrip_property(text):
    tok = toy_bpe()
    assert tok.decode(tok.encode(text)) == text
