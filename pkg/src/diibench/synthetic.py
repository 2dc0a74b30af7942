"""Synthetic checkpoints: random fixture models and the planted-feature model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PREFIX, Model, ModelConfig, expected_shapes, save_checkpoint
from .taskgen import TaskTemplate, load_task_spec
from .tokenizer import Tokenizer, build_lookup_tokenizer


def random_weights(cfg: ModelConfig, seed: int = 0, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Random weights at roughly unit activation scale, so gradients are O(1)."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("layernorm.weight") or name.endswith("layer_norm.weight"):
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            w = 0.1 * rng.standard_normal(shape)
        elif "embed_in" in name:
            w = rng.standard_normal(shape)
        else:
            w = rng.standard_normal(shape) * scale / np.sqrt(shape[-1])
        out[name] = w.astype(np.float32)
    return out


def zero_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, np.float32) for name, shape in expected_shapes(cfg).items()}


def fixture_config(vocab_size: int, n_layers: int = 2, d_model: int = 16, n_heads: int = 4, **kw) -> ModelConfig:
    defaults = dict(d_ff=4 * d_model, max_positions=64, rotary_fraction=0.5)
    defaults.update(kw)
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, vocab_size=vocab_size, **defaults)


def fixture_model(vocab_size: int, seed: int = 7, dtype=np.float32, **cfg_kw) -> Model:
    cfg = fixture_config(vocab_size, **cfg_kw)
    return Model(cfg, random_weights(cfg, seed), dtype)


def write_model_dir(path: str | Path, cfg: ModelConfig, weights, tok: Tokenizer) -> Path:
    """Lay out a model directory: config.json, model.safetensors, vocab.txt."""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    cfg.save(p / "config.json")
    save_checkpoint(weights, p / "model.safetensors")
    tok.save_vocab_file(p / "vocab.txt")
    return p


# ------------------------------------------------------- planted feature


PLANTED_TASK = {
    "name": "planted_toy",
    "types": ["up", "down"],
    "regions": [
        {"name": "det", "kind": "constant", "text": "the"},
        {"name": "adj", "kind": "variable", "options": ["red", "big", "old", "new", "odd", "shy"]},
        {"name": "verb", "kind": "variable", "options": ["saw", "met", "hit", "fed", "got"]},
        {
            "name": "key",
            "kind": "label_variable",
            "options": {
                "up": ["alpha", "beta", "gamma", "delta", "kappa", "sigma"],
                "down": ["omega", "theta", "zeta", "iota", "rho", "tau"],
            },
        },
    ],
    "label_options": {"up": [" yes"], "down": [" no"]},
    "control_labels": [" dog", " give"],
}


@dataclass
class PlantedFixture:
    model: Model
    tokenizer: Tokenizer
    template: TaskTemplate
    direction: np.ndarray  # the causal direction
    spurious: np.ndarray  # class-correlated but causally inert


def planted_feature_fixture(
    d_model: int = 128,
    n_layers: int = 2,
    signal: float = 1.0,
    spurious: float = 0.75,
    noise: float = 0.05,
    gain: float = 2.0,
    seed: int = 0,
    dtype=np.float32,
) -> PlantedFixture:
    """A model whose label logit difference is an affine function of h·d at every layer.

    Attention and MLP weights are zero, so each layer passes the embedding
    through unchanged. The final layernorm has a huge epsilon, making it linear
    to within ~1e-7; the two label rows of the unembedding are ±gain·d, all
    other rows are zero. Label-variable tokens are embedded at
    ±(signal·d + spurious·u) plus noise, where u ⊥ d is invisible to the output.
    Both d and u are orthogonal to the all-ones vector so mean-centering leaves
    them intact.
    """
    template = load_task_spec(PLANTED_TASK)
    tok = build_lookup_tokenizer([template])
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(np.column_stack([np.ones(d_model), rng.standard_normal((d_model, 2))]))
    d_dir, u_dir = basis[:, 1], basis[:, 2]

    cfg = ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=4,
        d_ff=4 * d_model,
        vocab_size=len(tok),
        max_positions=64,
        rotary_fraction=0.5,
        layernorm_epsilon=1e8,
    )
    w = {name: np.zeros(shape, np.float64) for name, shape in expected_shapes(cfg).items()}
    emb = rng.standard_normal((len(tok), d_model))
    key = template.label_region
    for sign, ty in ((1.0, "up"), (-1.0, "down")):
        for word in key.options[ty]:
            i = tok.vocab[" " + word]
            emb[i] = sign * (signal * d_dir + spurious * u_dir) + noise * rng.standard_normal(d_model)
    w[f"{PREFIX}embed_in.weight"] = emb
    for i in range(n_layers):
        w[f"{PREFIX}layers.{i}.input_layernorm.weight"] = np.ones(d_model)
        w[f"{PREFIX}layers.{i}.post_attention_layernorm.weight"] = np.ones(d_model)
    # sqrt(eps) undoes the layernorm's scale
    w[f"{PREFIX}final_layer_norm.weight"] = np.full(d_model, np.sqrt(cfg.layernorm_epsilon))
    unembed = np.zeros((len(tok), d_model))
    unembed[tok.vocab[" yes"]] = gain * d_dir
    unembed[tok.vocab[" no"]] = -gain * d_dir
    w["embed_out.weight"] = unembed
    model = Model(cfg, w, dtype)
    return PlantedFixture(model, tok, template, d_dir, u_dir)
