import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mppa.model import (
    COMPONENTS,
    ConfigError,
    ModelConfig,
    as_tensors,
    block_forward,
    count_parameters,
    gate_values,
    greedy_decode,
    init_params,
    logits_np,
    sequence_loss,
)
from mppa.numerics import Tensor, gelu, layer_norm, make_rng, matmul

SMALL = dict(vocab_size=20, d=8, heads=2, C=4, n_max=32)


def small(**kw):
    return ModelConfig(**{**SMALL, **kw})


@pytest.mark.parametrize(
    "kw",
    [dict(d=10, heads=4), dict(C=6), dict(n_max=2, C=4), dict(gating="bogus"), dict(layers=0)],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_config_needs_one_component():
    with pytest.raises(ConfigError):
        small(enable_gravitator=False, enable_energy=False, enable_periodicity=False)


def test_config_text_round_trip():
    cfg = small(enable_energy=False, gating="sequence_mean", ln_eps=1e-6)
    assert ModelConfig.from_items(dict(cfg.to_items())) == cfg


def test_presets():
    base = ModelConfig.baseline()
    assert base.enable_gravitator and not base.enable_energy and not base.enable_periodicity
    big = ModelConfig.paper()
    assert (big.d, big.layers, big.heads, big.C) == (1024, 12, 16, 16)


def test_parameter_inventory():
    cfg = small(layers=2)
    p = init_params(cfg, make_rng(0))
    assert p["tok_emb"].shape == (20, 8) and p["pos_emb"].shape == (32, 8)
    assert p["blocks.1.gate.w"].shape == (8, 3) and p["blocks.0.energy.intensity"].shape == ()
    base = init_params(ModelConfig.baseline(**SMALL), make_rng(0))
    assert not any("energy" in k or "period" in k or "gate" in k for k in base)
    assert count_parameters(base) < count_parameters(p)


def test_gates_at_zero_weights():
    H = Tensor(make_rng(0).standard_normal((5, 4)))
    g = gate_values(H, Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
    assert np.all(g.data == 0.5)


def test_gates_saturate():
    H = Tensor(make_rng(0).standard_normal((5, 4)))
    g = gate_values(H, Tensor(np.zeros((4, 3))), Tensor(np.full(3, 50.0)))
    assert np.all(g.data >= 1 - 1e-15)


def test_gates_match_prefix_mean_loop():
    rng = make_rng(2)
    H, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    g = gate_values(Tensor(H), Tensor(w), Tensor(b)).data
    for t in range(5):
        mean = H[: t + 1].sum(axis=0) / (t + 1)
        assert np.max(np.abs(g[t] - 1 / (1 + np.exp(-(mean @ w + b))))) < 1e-15


def test_sequence_mean_gates_are_constant_over_time():
    H = Tensor(make_rng(3).standard_normal((6, 4)))
    g = gate_values(H, Tensor(make_rng(4).standard_normal((4, 3))), Tensor(np.zeros(3)), "sequence_mean").data
    assert np.all(g == g[0])


def test_block_with_all_components_zeroed_is_feedforward_residual():
    cfg = small()
    p = as_tensors(init_params(cfg, make_rng(5), "random"))
    x = Tensor(make_rng(6).standard_normal((7, 8)))
    out = block_forward(x, p, 0, cfg, force_zero=COMPONENTS).data
    h = layer_norm(x, p["blocks.0.ln2.gain"], p["blocks.0.ln2.bias"])
    ff = matmul(gelu(matmul(h, p["blocks.0.ffn.w1"]) + p["blocks.0.ffn.b1"]), p["blocks.0.ffn.w2"]) + p["blocks.0.ffn.b2"]
    assert np.array_equal(out, (x + ff).data)


def test_energy_only_at_zero_intensity_adds_gated_prenorm():
    cfg = small(enable_gravitator=False, enable_periodicity=False)
    params = init_params(cfg, make_rng(7), "random")
    params["blocks.0.energy.intensity"] = np.array(0.0)
    p = as_tensors(params)
    x = Tensor(make_rng(8).standard_normal((9, 8)))
    H = layer_norm(x, p["blocks.0.ln1.gain"], p["blocks.0.ln1.bias"])
    g = gate_values(H, p["blocks.0.gate.w"], p["blocks.0.gate.b"])
    fused = x + g[..., 1:2] * H
    h = layer_norm(fused, p["blocks.0.ln2.gain"], p["blocks.0.ln2.bias"])
    ff = matmul(gelu(matmul(h, p["blocks.0.ffn.w1"]) + p["blocks.0.ffn.b1"]), p["blocks.0.ffn.w2"]) + p["blocks.0.ffn.b2"]
    assert np.array_equal(block_forward(x, p, 0, cfg).data, (fused + ff).data)


def test_block_rows_match_prefix_recomputation():
    cfg = small(C=4)
    p = as_tensors(init_params(cfg, make_rng(13), "random"))
    x = make_rng(14).standard_normal((16, 8))
    full = block_forward(Tensor(x), p, 0, cfg).data
    for t in range(16):
        assert np.array_equal(full[t], block_forward(Tensor(x[: t + 1]), p, 0, cfg).data[t])


def test_single_token_logits_shape():
    cfg = small()
    assert logits_np(np.array([3]), init_params(cfg, make_rng(0)), cfg).shape == (1, 20)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 30))
def test_append_invariance(seed, n):
    cfg = small()
    rng = make_rng(seed)
    params = init_params(cfg, make_rng(1), "random")
    tokens = rng.integers(20, size=n + 1)
    assert np.array_equal(logits_np(tokens, params, cfg)[:n], logits_np(tokens[:n], params, cfg))


def test_sequence_mean_gating_leaks_the_future():
    cfg = small(gating="sequence_mean")
    params = init_params(cfg, make_rng(2), "random")
    tokens = make_rng(3).integers(20, size=12)
    other = tokens.copy()
    other[-1] = (other[-1] + 1) % 20
    assert not np.array_equal(logits_np(tokens, params, cfg)[:-1], logits_np(other, params, cfg)[:-1])


def test_initial_loss_is_near_uniform():
    cfg = ModelConfig()
    batch = make_rng(4).integers(64, size=(4, 65))
    loss, _ = sequence_loss(as_tensors(init_params(cfg, make_rng(0))), cfg, batch)
    assert np.isfinite(loss.item()) and abs(loss.item() - math.log(64)) < 0.05


@pytest.mark.parametrize("component", COMPONENTS)
def test_disable_equals_force_zero(component):
    cfg = small()
    params = init_params(cfg, make_rng(5), "random")
    tokens = make_rng(6).integers(20, size=(2, 17))
    a = logits_np(tokens, params, cfg.with_disabled([component]))
    b = logits_np(tokens, params, cfg, force_zero=(component,))
    assert np.array_equal(a, b)


def test_batched_forward_equals_single():
    cfg = small()
    params = init_params(cfg, make_rng(7), "random")
    tokens = make_rng(8).integers(20, size=(3, 11))
    batched = logits_np(tokens, params, cfg)
    for i in range(3):
        assert np.array_equal(batched[i], logits_np(tokens[i], params, cfg))


@pytest.mark.parametrize("bad, message", [(np.array([1, 25, 3]), r"position \(1,\)"), (np.array([1.5, 2.0]), "integers")])
def test_bad_tokens(bad, message):
    cfg = small()
    with pytest.raises(ValueError, match=message):
        logits_np(bad, init_params(cfg, make_rng(0)), cfg)


def test_too_long_sequence():
    cfg = small()
    with pytest.raises(ValueError, match="n_max"):
        logits_np(np.zeros(33, dtype=int), init_params(cfg, make_rng(0)), cfg)


def test_missing_parameter_is_named():
    cfg = small()
    params = init_params(cfg, make_rng(0))
    del params["blocks.0.attn.w_q"]
    with pytest.raises(KeyError, match="w_q"):
        logits_np(np.array([1, 2]), params, cfg)


def test_greedy_decode_is_argmax_continuation():
    cfg = small()
    params = init_params(cfg, make_rng(9), "random")
    prompt = np.array([[0, 5, 7]])
    out = greedy_decode(prompt, params, cfg, 3)
    assert out.shape == (1, 6) and np.array_equal(out[:, :3], prompt)
    for j in range(3, 6):
        assert out[0, j] == np.argmax(logits_np(out[0, :j], params, cfg)[-1])
