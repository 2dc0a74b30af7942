import math

import numpy as np
import pytest
from scipy.special import erf

from diibench.intervene import Direction, dii_apply
from diibench.model import (
    PREFIX,
    HookSite,
    MissingTensorError,
    ModelConfig,
    Model,
    NonFiniteValueError,
    ShapeMismatchError,
    SiteError,
    all_position_logprobs,
    direction_grad,
    forward,
    forward_intervened,
    load_checkpoint,
    save_checkpoint,
)
from diibench.synthetic import fixture_config, random_weights, zero_weights

IDS = [3, 17, 5, 42, 8, 11, 29]


def oracle_logits(cfg: ModelConfig, w, ids):
    """Token-by-token, head-by-head GPT-NeoX in float64 with explicit loops."""
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    rd = int(hd * cfg.rotary_fraction)
    eps = cfg.layernorm_epsilon
    g = lambda k: np.asarray(w[k], dtype=np.float64)  # noqa: E731

    def ln(x, gain, bias):
        mu = sum(x) / len(x)
        var = sum((xi - mu) ** 2 for xi in x) / len(x)
        return (x - mu) / math.sqrt(var + eps) * gain + bias

    def rope(v, pos):
        out = v.copy()
        half = rd // 2
        for i in range(half):
            theta = pos / (cfg.rotary_base ** (2 * i / rd))
            c, s = math.cos(theta), math.sin(theta)
            x1, x2 = v[i], v[i + half]
            out[i] = x1 * c - x2 * s
            out[i + half] = x2 * c + x1 * s
        return out

    T = len(ids)
    xs = [g(f"{PREFIX}embed_in.weight")[t] for t in ids]
    for layer in range(cfg.n_layers):
        p = f"{PREFIX}layers.{layer}."
        Wqkv, bqkv = g(p + "attention.query_key_value.weight"), g(p + "attention.query_key_value.bias")
        new = []
        qs, ks, vs = [], [], []
        for t in range(T):
            h = ln(xs[t], g(p + "input_layernorm.weight"), g(p + "input_layernorm.bias"))
            qkv = (Wqkv @ h + bqkv).reshape(H, 3, hd)
            qs.append([rope(qkv[i, 0], t) for i in range(H)])
            ks.append([rope(qkv[i, 1], t) for i in range(H)])
            vs.append([qkv[i, 2] for i in range(H)])
        for t in range(T):
            heads = []
            for i in range(H):
                scores = [qs[t][i] @ ks[u][i] / math.sqrt(hd) for u in range(t + 1)]
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                heads.append(sum(e[u] / z * vs[u][i] for u in range(t + 1)))
            attn = g(p + "attention.dense.weight") @ np.concatenate(heads) + g(p + "attention.dense.bias")
            h2 = ln(xs[t], g(p + "post_attention_layernorm.weight"), g(p + "post_attention_layernorm.bias"))
            pre = g(p + "mlp.dense_h_to_4h.weight") @ h2 + g(p + "mlp.dense_h_to_4h.bias")
            act = 0.5 * pre * (1 + erf(pre / math.sqrt(2)))
            mlp = g(p + "mlp.dense_4h_to_h.weight") @ act + g(p + "mlp.dense_4h_to_h.bias")
            new.append(xs[t] + attn + mlp)
        xs = new
    hf = ln(xs[-1], g(f"{PREFIX}final_layer_norm.weight"), g(f"{PREFIX}final_layer_norm.bias"))
    return g("embed_out.weight") @ hf


def log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


@pytest.fixture(scope="module")
def cfg():
    return fixture_config(64)


@pytest.fixture(scope="module")
def weights(cfg):
    return random_weights(cfg, seed=7)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_matches_straight_line_oracle(cfg, weights, dtype):
    m = Model(cfg, weights, dtype)
    logp, cache = forward(m, IDS)
    ref = log_softmax(oracle_logits(cfg, weights, IDS))
    np.testing.assert_allclose(logp, ref, rtol=1e-5, atol=1e-5 if dtype == np.float32 else 1e-10)
    assert cache.shape == (cfg.n_layers, len(IDS), cfg.d_model)


def test_forward_matches_reference_implementation(cfg, weights):
    torch = pytest.importorskip("torch")
    tr = pytest.importorskip("transformers")
    hf_cfg = tr.GPTNeoXConfig(
        vocab_size=cfg.vocab_size, hidden_size=cfg.d_model, num_hidden_layers=cfg.n_layers,
        num_attention_heads=cfg.n_heads, intermediate_size=cfg.d_ff, rotary_pct=cfg.rotary_fraction,
        max_position_embeddings=cfg.max_positions, use_parallel_residual=True, hidden_act="gelu",
        layer_norm_eps=cfg.layernorm_epsilon, tie_word_embeddings=False, attention_dropout=0.0, hidden_dropout=0.0,
    )
    ref = tr.GPTNeoXForCausalLM(hf_cfg).double().eval()
    sd = {k: torch.from_numpy(np.asarray(v, np.float64)) for k, v in weights.items()}
    missing, unexpected = ref.load_state_dict(sd, strict=False)
    assert not [k for k in missing if "rotary" not in k and "masked_bias" not in k and not k.endswith(".bias")]
    with torch.no_grad():
        out = ref(torch.tensor([IDS])).logits[0].numpy()
    ours = all_position_logprobs(Model(cfg, weights, np.float64), IDS)
    np.testing.assert_allclose(ours, np.stack([log_softmax(z) for z in out]), atol=1e-9)


def test_normalization(model):
    logp, _ = forward(model, IDS)
    assert abs(np.exp(logp).sum() - 1) < 1e-5


def test_zero_weights_tied_uniform():
    cfg = fixture_config(50, tied_embeddings=True)
    m = Model(cfg, zero_weights(cfg))
    logp, _ = forward(m, [1, 2, 3])
    np.testing.assert_allclose(logp, -math.log(50), atol=1e-12)


def test_causal_masking(model):
    full = all_position_logprobs(model, IDS + [1, 2, 3])
    short = all_position_logprobs(model, IDS)
    np.testing.assert_allclose(full[: len(IDS)], short, atol=1e-6)


def test_rotary_relative_positions():
    # one head, full rotary: identical content at every position, so q_t·k_u depends on t−u only
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=1, d_ff=8, vocab_size=4, rotary_fraction=1.0)
    m = Model(cfg, random_weights(cfg, 3), np.float64)
    x = np.tile(m.embed[1], (10, 1))
    from diibench.model import _attention

    _, (q, k, _, _) = _attention(m, m.layers[0], x, keep=True)
    scores = q[0] @ k[0].T
    for t in range(2, 10):
        for u in range(1, t + 1):
            assert scores[t, u] == pytest.approx(scores[t - 1, u - 1], abs=1e-10)


def test_determinism(model):
    a, ca = forward(model, IDS)
    b, cb = forward(model, IDS)
    assert np.array_equal(a, b) and np.array_equal(ca, cb)


def test_length_and_site_errors(model):
    with pytest.raises(ValueError):
        forward(model, [])
    with pytest.raises(ValueError):
        forward(model, list(range(model.config.max_positions + 1)))
    with pytest.raises(SiteError):
        forward_intervened(model, IDS, HookSite(model.n_layers, 0), np.zeros(model.config.d_model))
    with pytest.raises(SiteError):
        forward_intervened(model, IDS, HookSite(0, len(IDS)), np.zeros(model.config.d_model))


def test_noop_intervention_is_exact(model):
    logp, cache = forward(model, IDS)
    for layer in range(model.n_layers):
        for pos in range(len(IDS)):
            out = forward_intervened(model, IDS, HookSite(layer, pos), cache[layer, pos])
            assert np.array_equal(out, logp)


def test_final_layer_final_position_replacement(model):
    ids_s = [9, 4, 4, 7, 1]
    lp_s, cache_s = forward(model, ids_s)
    L = model.n_layers - 1
    out = forward_intervened(model, IDS, HookSite(L, len(IDS) - 1), cache_s[L, -1])
    assert 0.5 * np.abs(np.exp(out) - np.exp(lp_s)).sum() < 1e-5


def test_zero_replacement_is_normalized(model):
    out = forward_intervened(model, IDS, HookSite(0, 2), np.zeros(model.config.d_model))
    assert abs(np.exp(out).sum() - 1) < 1e-5


def test_checkpoint_errors(tmp_path, cfg, weights):
    save_checkpoint(weights, tmp_path / "ok.safetensors")
    m = load_checkpoint(tmp_path / "ok.safetensors", cfg)
    forward(m, IDS)
    w = dict(weights)
    del w[f"{PREFIX}final_layer_norm.weight"]
    with pytest.raises(MissingTensorError, match="final_layer_norm"):
        load_checkpoint(w, cfg)
    w = dict(weights)
    w["embed_out.weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeMismatchError, match="embed_out"):
        load_checkpoint(w, cfg)
    w = dict(weights)
    bad = np.array(w[f"{PREFIX}layers.1.mlp.dense_4h_to_h.bias"])
    bad[0] = np.nan
    w[f"{PREFIX}layers.1.mlp.dense_4h_to_h.bias"] = bad
    with pytest.raises(NonFiniteValueError, match="dense_4h_to_h"):
        load_checkpoint(w, cfg)


def test_weights_are_immutable(model):
    with pytest.raises(ValueError):
        model.embed[0, 0] = 1.0


def test_config_hf_keys(tmp_path):
    c = ModelConfig.from_dict({"num_hidden_layers": 6, "hidden_size": 128, "num_attention_heads": 4,
                               "intermediate_size": 512, "vocab_size": 50304, "rotary_pct": 0.25,
                               "use_parallel_residual": True, "layer_norm_eps": 1e-5, "hidden_act": "gelu"})
    assert (c.n_layers, c.d_model, c.rotary_dims) == (6, 128, 8)
    c.save(tmp_path / "c.json")
    assert ModelConfig.load(tmp_path / "c.json") == c
    with pytest.raises(ValueError):
        ModelConfig(n_layers=1, d_model=10, n_heads=3, d_ff=4, vocab_size=5)


# gradient checks


def _fd_grad(model, ids_b, site_b, h_s, a, target, step=1e-3):
    fd = np.zeros_like(a)
    cache_b = forward(model, ids_b)[1]
    for i in range(a.size):
        e = np.zeros_like(a)
        e[i] = step
        lp = forward_intervened(model, ids_b, site_b, dii_apply(cache_b[site_b.layer, site_b.position], h_s, a + e), cache_b)
        lm = forward_intervened(model, ids_b, site_b, dii_apply(cache_b[site_b.layer, site_b.position], h_s, a - e), cache_b)
        fd[i] = (-lp[target] + lm[target]) / (2 * step)
    return fd


@pytest.mark.parametrize("d_model", [8, 16])
def test_direction_grad_matches_finite_differences(tok, agr_pairs, d_model):
    from diibench.synthetic import fixture_model

    m = fixture_model(len(tok), seed=7, dtype=np.float64, d_model=d_model, n_heads=4 if d_model == 16 else 2)
    rng = np.random.default_rng(0)
    train, _ = agr_pairs
    for k in range(5):
        p = train[int(rng.integers(len(train)))]
        layer = int(rng.integers(m.n_layers))
        region = p.alignment.regions[int(rng.integers(1, len(p.alignment.regions)))]
        a = Direction.from_vector(rng.standard_normal(d_model)).a
        sb, ss = HookSite(layer, p.alignment.base_index(region)), HookSite(layer, p.alignment.source_index(region))
        loss, g = direction_grad(m, p.ids_b, p.ids_s, sb, ss, a, p.y_s)
        assert math.isfinite(loss) and loss > 0
        h_s = forward(m, p.ids_s)[1][ss.layer, ss.position]
        fd = _fd_grad(m, p.ids_b, sb, h_s, a, p.y_s)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0) < 1e-6


def test_grad_zero_when_activations_match(model):
    _, cache = forward(model, IDS)
    a = Direction.from_vector(np.ones(model.config.d_model)).a
    site = HookSite(0, 3)
    loss, g = direction_grad(model, IDS, IDS, site, site, a, 5)
    assert np.abs(g).max() < 1e-6
    assert loss == pytest.approx(-forward(model, IDS)[0][5], abs=1e-5)
