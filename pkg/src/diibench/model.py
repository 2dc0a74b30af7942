"""A frozen GPT-NeoX style decoder in numpy.

Supports plain forward passes with residual-stream capture, forward passes in
which a single residual vector is overwritten, and reverse-mode gradients of
the next-token cross-entropy with respect to a 1D interchange direction.
Weights never receive gradients; the backward pass only propagates activation
gradients through the layers above the intervention site.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import erf

from . import container

PREFIX = "gpt_neox."


class CheckpointError(ValueError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class NonFiniteValueError(CheckpointError):
    pass


class SiteError(IndexError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_positions: int = 2048
    rotary_fraction: float = 0.25
    parallel_residual: bool = True
    layernorm_epsilon: float = 1e-5
    tied_embeddings: bool = False
    rotary_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 < self.rotary_fraction <= 1:
            raise ValueError("rotary_fraction must be in (0, 1]")
        if self.rotary_dims % 2:
            raise ValueError(f"rotary dims per head ({self.rotary_dims}) must be even")
        if self.layernorm_epsilon <= 0:
            raise ValueError("layernorm_epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rotary_dims(self) -> int:
        return int(self.head_dim * self.rotary_fraction)

    # HuggingFace GPT-NeoX config keys
    _HF_KEYS = {
        "num_hidden_layers": "n_layers",
        "hidden_size": "d_model",
        "num_attention_heads": "n_heads",
        "intermediate_size": "d_ff",
        "vocab_size": "vocab_size",
        "max_position_embeddings": "max_positions",
        "rotary_pct": "rotary_fraction",
        "use_parallel_residual": "parallel_residual",
        "layer_norm_eps": "layernorm_epsilon",
        "tie_word_embeddings": "tied_embeddings",
        "rotary_emb_base": "rotary_base",
    }

    @classmethod
    def from_dict(cls, doc: Mapping) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        kw = {}
        for k, v in doc.items():
            k = cls._HF_KEYS.get(k, k)
            if k in names:
                kw[k] = v
        if "hidden_act" in doc and doc["hidden_act"] not in ("gelu", "gelu_python"):
            raise ValueError(f"unsupported activation {doc['hidden_act']!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {f"{PREFIX}embed_in.weight": (v, d)}
    for i in range(cfg.n_layers):
        p = f"{PREFIX}layers.{i}."
        shapes.update(
            {
                p + "input_layernorm.weight": (d,),
                p + "input_layernorm.bias": (d,),
                p + "post_attention_layernorm.weight": (d,),
                p + "post_attention_layernorm.bias": (d,),
                p + "attention.query_key_value.weight": (3 * d, d),
                p + "attention.query_key_value.bias": (3 * d,),
                p + "attention.dense.weight": (d, d),
                p + "attention.dense.bias": (d,),
                p + "mlp.dense_h_to_4h.weight": (ff, d),
                p + "mlp.dense_h_to_4h.bias": (ff,),
                p + "mlp.dense_4h_to_h.weight": (d, ff),
                p + "mlp.dense_4h_to_h.bias": (d,),
            }
        )
    shapes[f"{PREFIX}final_layer_norm.weight"] = (d,)
    shapes[f"{PREFIX}final_layer_norm.bias"] = (d,)
    if not cfg.tied_embeddings:
        shapes["embed_out.weight"] = (v, d)
    return shapes


@dataclass(frozen=True)
class HookSite:
    layer: int
    position: int


@dataclass(frozen=True)
class _Layer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    wq: np.ndarray  # [H, hd, d]
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray  # [H, hd]
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # [d, d]
    bo: np.ndarray
    w1: np.ndarray  # [ff, d]
    b1: np.ndarray
    w2: np.ndarray  # [d, ff]
    b2: np.ndarray


class Model:
    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray], dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        w = {k: _frozen(np.asarray(v, dtype=self.dtype)) for k, v in weights.items()}
        self.weights = w
        cfg = config
        H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        self.embed = w[f"{PREFIX}embed_in.weight"]
        self.unembed = self.embed if cfg.tied_embeddings else w["embed_out.weight"]
        self.lnf_g = w[f"{PREFIX}final_layer_norm.weight"]
        self.lnf_b = w[f"{PREFIX}final_layer_norm.bias"]
        layers = []
        for i in range(cfg.n_layers):
            p = f"{PREFIX}layers.{i}."
            # fused qkv rows are laid out per head as [q | k | v]
            qkv = w[p + "attention.query_key_value.weight"].reshape(H, 3, hd, d)
            qkv_b = w[p + "attention.query_key_value.bias"].reshape(H, 3, hd)
            layers.append(
                _Layer(
                    ln1_g=w[p + "input_layernorm.weight"],
                    ln1_b=w[p + "input_layernorm.bias"],
                    ln2_g=w[p + "post_attention_layernorm.weight"],
                    ln2_b=w[p + "post_attention_layernorm.bias"],
                    wq=_frozen(qkv[:, 0].copy()),
                    wk=_frozen(qkv[:, 1].copy()),
                    wv=_frozen(qkv[:, 2].copy()),
                    bq=_frozen(qkv_b[:, 0].copy()),
                    bk=_frozen(qkv_b[:, 1].copy()),
                    bv=_frozen(qkv_b[:, 2].copy()),
                    wo=w[p + "attention.dense.weight"],
                    bo=w[p + "attention.dense.bias"],
                    w1=w[p + "mlp.dense_h_to_4h.weight"],
                    b1=w[p + "mlp.dense_h_to_4h.bias"],
                    w2=w[p + "mlp.dense_4h_to_h.weight"],
                    b2=w[p + "mlp.dense_4h_to_h.bias"],
                )
            )
        self.layers = tuple(layers)
        rd = cfg.rotary_dims
        inv_freq = 1.0 / (cfg.rotary_base ** (np.arange(0, rd, 2, dtype=np.float64) / rd))
        t = np.arange(cfg.max_positions, dtype=np.float64)
        ang = np.outer(t, inv_freq)
        ang = np.concatenate([ang, ang], axis=-1)
        self._cos = _frozen(np.cos(ang).astype(self.dtype))
        self._sin = _frozen(np.sin(ang).astype(self.dtype))

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def astype(self, dtype) -> Model:
        return Model(self.config, self.weights, dtype)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def load_checkpoint(source: str | Path | Mapping[str, np.ndarray], config: ModelConfig, dtype=np.float32) -> Model:
    """Validate and load weights from a container file (or an in-memory tensor map)."""
    if isinstance(source, (str, Path)):
        try:
            tensors, _ = container.load_file(source)
        except container.ContainerError as e:
            raise CheckpointError(f"{source}: {e}") from e
    else:
        tensors = dict(source)
    for name, shape in expected_shapes(config).items():
        if name not in tensors:
            raise MissingTensorError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise ShapeMismatchError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
        if not np.all(np.isfinite(tensors[name])):
            raise NonFiniteValueError(f"{name}: contains non-finite values")
    needed = expected_shapes(config)
    return Model(config, {k: v for k, v in tensors.items() if k in needed}, dtype)


def save_checkpoint(weights: Mapping[str, np.ndarray], path: str | Path) -> None:
    container.save_file({k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}, path)


# ---------------------------------------------------------------- kernels


def _layernorm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotary(x, cos, sin, rd):
    rot = x[..., :rd] * cos + _rotate_half(x[..., :rd]) * sin
    return np.concatenate([rot, x[..., rd:]], axis=-1)


def _rotary_back(dy, cos, sin, rd):
    # transpose of the rotation: rotate_half^T = -rotate_half
    d_rot = dy[..., :rd] * cos - _rotate_half(dy[..., :rd] * sin)
    return np.concatenate([d_rot, dy[..., rd:]], axis=-1)


def _attention(model: Model, L: _Layer, x, keep: bool):
    T = x.shape[0]
    cfg = model.config
    rd = cfg.rotary_dims
    cos, sin = model._cos[:T], model._sin[:T]
    q = np.einsum("td,hed->hte", x, L.wq) + L.bq[:, None, :]
    k = np.einsum("td,hed->hte", x, L.wk) + L.bk[:, None, :]
    v = np.einsum("td,hed->hte", x, L.wv) + L.bv[:, None, :]
    q = _rotary(q, cos, sin, rd)
    k = _rotary(k, cos, sin, rd)
    scale = model.dtype.type(1.0 / math.sqrt(cfg.head_dim))
    s = (q @ k.transpose(0, 2, 1)) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(-1, keepdims=True)
    o = p @ v
    o_flat = o.transpose(1, 0, 2).reshape(T, cfg.d_model)
    out = o_flat @ L.wo.T + L.bo
    return out, ((q, k, v, p) if keep else None)


def _attention_back(model: Model, L: _Layer, dout, cache):
    q, k, v, p = cache
    cfg = model.config
    H, T, hd = q.shape
    rd = cfg.rotary_dims
    cos, sin = model._cos[:T], model._sin[:T]
    scale = model.dtype.type(1.0 / math.sqrt(hd))
    do = (dout @ L.wo).reshape(T, H, hd).transpose(1, 0, 2)
    dp = do @ v.transpose(0, 2, 1)
    dv = p.transpose(0, 2, 1) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    dq = _rotary_back(ds @ k, cos, sin, rd)
    dk = _rotary_back(ds.transpose(0, 2, 1) @ q, cos, sin, rd)
    return (
        np.einsum("hte,hed->td", dq, L.wq)
        + np.einsum("hte,hed->td", dk, L.wk)
        + np.einsum("hte,hed->td", dv, L.wv)
    )


def _mlp(L: _Layer, x, keep: bool):
    pre = x @ L.w1.T + L.b1
    out = _gelu(pre) @ L.w2.T + L.b2
    return out, (pre if keep else None)


def _mlp_back(L: _Layer, dout, pre):
    return ((dout @ L.w2) * _gelu_grad(pre)) @ L.w1


def _layer_forward(model: Model, L: _Layer, x, keep: bool = False):
    eps = model.config.layernorm_epsilon
    a_in, ln1 = _layernorm(x, L.ln1_g, L.ln1_b, eps)
    attn, acache = _attention(model, L, a_in, keep)
    if model.config.parallel_residual:
        m_in, ln2 = _layernorm(x, L.ln2_g, L.ln2_b, eps)
        mlp, mcache = _mlp(L, m_in, keep)
        out = x + attn + mlp
    else:
        h = x + attn
        m_in, ln2 = _layernorm(h, L.ln2_g, L.ln2_b, eps)
        mlp, mcache = _mlp(L, m_in, keep)
        out = h + mlp
    return out, ((ln1, acache, ln2, mcache) if keep else None)


def _layer_backward(model: Model, L: _Layer, dout, cache):
    ln1, acache, ln2, mcache = cache
    d_mlp_in = _layernorm_back(_mlp_back(L, dout, mcache), L.ln2_g, ln2)
    if model.config.parallel_residual:
        dx = dout + d_mlp_in
        dx = dx + _layernorm_back(_attention_back(model, L, dout, acache), L.ln1_g, ln1)
    else:
        dh = dout + d_mlp_in
        dx = dh + _layernorm_back(_attention_back(model, L, dh, acache), L.ln1_g, ln1)
    return dx


def _log_softmax64(logits):
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _check_ids(model: Model, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or not 1 <= len(ids) <= model.config.max_positions:
        raise ValueError(f"sequence length must be in [1, {model.config.max_positions}], got {ids.shape}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    return ids


def _check_site(model: Model, site: HookSite, T: int) -> None:
    if not 0 <= site.layer < model.n_layers:
        raise SiteError(f"layer {site.layer} outside [0, {model.n_layers})")
    if not 0 <= site.position < T:
        raise SiteError(f"position {site.position} outside [0, {T})")


def _final(model: Model, x_last):
    xf, _ = _layernorm(x_last, model.lnf_g, model.lnf_b, model.config.layernorm_epsilon)
    return model.unembed @ xf


def _run_from(model: Model, resid, start: int):
    x = resid
    for L in model.layers[start:]:
        x, _ = _layer_forward(model, L, x)
    return x


def forward(model: Model, ids) -> tuple[np.ndarray, np.ndarray]:
    """Final-position next-token log-probs (float64) and the [L, T, d] residual cache."""
    ids = _check_ids(model, ids)
    x = model.embed[ids]
    cache = np.empty((model.n_layers, len(ids), model.config.d_model), dtype=model.dtype)
    for i, L in enumerate(model.layers):
        x, _ = _layer_forward(model, L, x)
        cache[i] = x
    return _log_softmax64(_final(model, x[-1])), cache


def all_position_logprobs(model: Model, ids) -> np.ndarray:
    """Log-probs at every position; used for causal-masking checks."""
    ids = _check_ids(model, ids)
    x = model.embed[ids]
    for L in model.layers:
        x, _ = _layer_forward(model, L, x)
    xf, _ = _layernorm(x, model.lnf_g, model.lnf_b, model.config.layernorm_epsilon)
    z = (xf @ model.unembed.T).astype(np.float64)
    z -= z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _layer_input(model: Model, ids, layer: int, cache):
    if cache is not None:
        return cache[layer]
    x = model.embed[ids]
    for L in model.layers[: layer + 1]:
        x, _ = _layer_forward(model, L, x)
    return x


def forward_intervened(model: Model, ids_b, site: HookSite, replacement, cache=None) -> np.ndarray:
    """Like :func:`forward`, but the output of ``site.layer`` at ``site.position`` is replaced."""
    ids_b = _check_ids(model, ids_b)
    _check_site(model, site, len(ids_b))
    rep = np.asarray(replacement, dtype=model.dtype)
    if rep.shape != (model.config.d_model,):
        raise ValueError(f"replacement must have shape ({model.config.d_model},)")
    x = np.array(_layer_input(model, ids_b, site.layer, cache), dtype=model.dtype)
    x[site.position] = rep
    x = _run_from(model, x, site.layer + 1)
    return _log_softmax64(_final(model, x[-1]))


def direction_grad(
    model: Model,
    ids_b,
    ids_s,
    site_b: HookSite,
    site_s: HookSite,
    a,
    target: int,
    cache_b=None,
    cache_s=None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``target`` under 1D DII along ``a`` and its gradient w.r.t. ``a``.

    ``a`` is used as given (no renormalization inside), so the gradient is the
    plain Euclidean one and can be checked with finite differences.
    """
    ids_b = _check_ids(model, ids_b)
    ids_s = _check_ids(model, ids_s)
    _check_site(model, site_b, len(ids_b))
    _check_site(model, site_s, len(ids_s))
    a = np.asarray(a, dtype=model.dtype)
    if cache_b is None:
        _, cache_b = forward(model, ids_b)
    if cache_s is None:
        _, cache_s = forward(model, ids_s)
    h_b = cache_b[site_b.layer, site_b.position]
    h_s = cache_s[site_s.layer, site_s.position]
    delta = h_s - h_b
    proj = delta @ a
    x = np.array(cache_b[site_b.layer], dtype=model.dtype)
    x[site_b.position] = h_b + proj * a

    caches = []
    for L in model.layers[site_b.layer + 1 :]:
        x, c = _layer_forward(model, L, x, keep=True)
        caches.append(c)
    xf, fcache = _layernorm(x[-1], model.lnf_g, model.lnf_b, model.config.layernorm_epsilon)
    logp = _log_softmax64(model.unembed @ xf)
    loss = float(-logp[target])

    dlogits = np.exp(logp)
    dlogits[target] -= 1.0
    dxf = dlogits.astype(model.dtype) @ model.unembed
    dx = np.zeros_like(x)
    dx[-1] = _layernorm_back(dxf, model.lnf_g, fcache)
    for L, c in zip(reversed(model.layers[site_b.layer + 1 :]), reversed(caches)):
        dx = _layer_backward(model, L, dx, c)
    g = dx[site_b.position]
    grad = (g @ a) * delta + proj * g
    return loss, grad
