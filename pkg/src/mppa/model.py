"""Gated fusion blocks, the decoder stack and the autoregressive loss.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
(``blocks.0.attn.w_q`` ...). The forward functions take the same mapping with
values wrapped as :class:`~mppa.numerics.Tensor`, so one code path serves
inference (plain tensors) and training (tensors that require grad).

Block layout::

    H      = LN1(x)
    fused  = x + g_g*Z(H) + g_e*E(H) + g_p*T(H)
    out    = fused + FFN(LN2(fused))

Gates are per position, computed from the causal prefix mean of ``H``. The
``sequence_mean`` gating mode uses the whole-sequence mean instead, which leaks
future tokens and exists only to study that failure; ``none`` fixes every gate
at 1 and is used by the attention-only baseline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from mppa.energy import energy_encode
from mppa.gravitator import AttentionParams, causal_attention
from mppa.numerics import (
    Tensor,
    cross_entropy,
    cumsum,
    gelu,
    is_power_of_two,
    layer_norm,
    matmul,
    sigmoid,
    swapaxes,
    take_rows,
)
from mppa.periodicity import PeriodicityParams, periodicity_encode

COMPONENTS = ("gravitator", "energy", "periodicity")
GATING_MODES = ("causal_prefix", "sequence_mean", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d: int = 32
    layers: int = 2
    heads: int = 4
    C: int = 8
    n_max: int = 128
    d_ff: int = 0  # 0 -> 4*d
    d_spec: int = 0  # periodicity MLP hidden width, 0 -> 2*d
    enable_gravitator: bool = True
    enable_energy: bool = True
    enable_periodicity: bool = True
    gating: str = "causal_prefix"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.vocab_size, self.d, self.layers, self.heads, self.C, self.n_max) < 1:
            raise ConfigError("model sizes must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not is_power_of_two(self.C):
            raise ConfigError(f"chunk size C={self.C} must be a power of two")
        if self.n_max < self.C:
            raise ConfigError(f"n_max={self.n_max} must be >= C={self.C}")
        if not any(self.enabled(c) for c in COMPONENTS):
            raise ConfigError("at least one component must be enabled")
        if self.gating not in GATING_MODES:
            raise ConfigError(f"gating must be one of {GATING_MODES}, got {self.gating!r}")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d

    @property
    def spec_width(self) -> int:
        return self.d_spec or 2 * self.d

    def enabled(self, component: str) -> bool:
        return getattr(self, f"enable_{component}")

    def with_disabled(self, components: Iterable[str]) -> "ModelConfig":
        changes = {}
        for c in components:
            if c not in COMPONENTS:
                raise ConfigError(f"unknown component {c!r}")
            changes[f"enable_{c}"] = False
        return dataclasses.replace(self, **changes)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        kw.setdefault("enable_energy", False)
        kw.setdefault("enable_periodicity", False)
        kw.setdefault("gating", "none")
        return cls(**kw)

    @classmethod
    def paper(cls) -> "ModelConfig":
        # 12 layers, width 1024, 16 heads, chunk 16, GPT-2 vocabulary
        return cls(vocab_size=50257, d=1024, layers=12, heads=16, C=16, n_max=256)

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, str(getattr(self, f.name))) for f in dataclasses.fields(self)]

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown model setting {key!r}")
            kind = types[key]
            if kind == "bool":
                low = str(raw).strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
                kw[key] = low in ("true", "1", "yes")
            elif kind == "int":
                kw[key] = int(raw)
            elif kind == "float":
                kw[key] = float(raw)
            else:
                kw[key] = str(raw).strip()
        return cls(**kw)


# -- parameters ------------------------------------------------------------------------


def init_params(cfg: ModelConfig, rng: np.random.Generator, scheme: str = "standard") -> dict[str, np.ndarray]:
    """Named parameter arrays.

    ``standard`` starts the energy and periodicity components as exact
    identities (zero intensity, zero second MLP layer) with gates at 0.5.
    ``random`` draws every tensor away from those fixed points, which is what
    gradient checks and causality audits need to exercise every path.
    """
    if scheme not in ("standard", "random"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rand = scheme == "random"
    d, V, dff, dh = cfg.d, cfg.vocab_size, cfg.ff_width, cfg.spec_width
    out_scale = 1.0 / np.sqrt(2 * cfg.layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    def zeros(shape, std=0.1):
        return normal(shape, std) if rand else np.zeros(shape)

    def ones(shape):
        return 1.0 + normal(shape, 0.1) if rand else np.ones(shape)

    p: dict[str, np.ndarray] = {
        "tok_emb": normal((V, d), 0.3 if rand else 0.02),
        "pos_emb": normal((cfg.n_max, d), 0.3 if rand else 0.02),
    }
    for b in range(cfg.layers):
        pre = f"blocks.{b}."
        p[pre + "ln1.gain"] = ones(d)
        p[pre + "ln1.bias"] = zeros(d)
        if cfg.enable_gravitator:
            for name in ("w_q", "w_k", "w_v"):
                p[pre + "attn." + name] = normal((d, d), 1.0 / np.sqrt(d))
            p[pre + "attn.w_o"] = normal((d, d), out_scale / np.sqrt(d))
        if cfg.enable_energy:
            p[pre + "energy.intensity"] = zeros((), 0.5)
        if cfg.enable_periodicity:
            p[pre + "period.alpha_raw"] = zeros(d, 0.5)
            p[pre + "period.w1"] = normal((d, dh), 1.0 / np.sqrt(d))
            p[pre + "period.b1"] = zeros(dh)
            p[pre + "period.w2"] = zeros((dh, d), 0.3)
            p[pre + "period.b2"] = zeros(d)
        if cfg.gating != "none":
            p[pre + "gate.w"] = zeros((d, 3), 0.3)
            p[pre + "gate.b"] = zeros(3, 0.5)
        p[pre + "ln2.gain"] = ones(d)
        p[pre + "ln2.bias"] = zeros(d)
        p[pre + "ffn.w1"] = normal((d, dff), 1.0 / np.sqrt(d))
        p[pre + "ffn.b1"] = zeros(dff)
        p[pre + "ffn.w2"] = normal((dff, d), out_scale / np.sqrt(dff))
        p[pre + "ffn.b2"] = zeros(d)
    p["ln_f.gain"] = ones(d)
    p["ln_f.bias"] = zeros(d)
    return p


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def _need(params, name):
    try:
        return params[name]
    except KeyError:
        raise KeyError(f"parameter {name!r} missing; was the model built with this component enabled?") from None


# -- forward -----------------------------------------------------------------------------


def gate_values(H, w, b, mode: str = "causal_prefix") -> Tensor:
    """Gates (..., n, 3) for the gravitator, energy and periodicity tracks, in that order."""
    n = H.shape[-2]
    if mode == "causal_prefix":
        summary = cumsum(H, axis=-2) / np.arange(1, n + 1, dtype=np.float64)[:, None]
    elif mode == "sequence_mean":
        summary = H.mean(axis=-2, keepdims=True)
    else:
        raise ValueError(f"gate values are undefined for gating={mode!r}")
    g = sigmoid(matmul(summary, w) + b)
    if mode == "sequence_mean":
        g = g + Tensor(np.zeros(H.shape[:-1] + (3,)))
    return g


def component_output(c: str, H: Tensor, params: Mapping[str, Tensor], b: int, cfg: ModelConfig) -> Tensor:
    pre = f"blocks.{b}."
    if c == "gravitator":
        names = ("w_q", "w_k", "w_v", "w_o")
        return causal_attention(H, AttentionParams(*(_need(params, pre + "attn." + k) for k in names), cfg.heads))
    if c == "energy":
        return energy_encode(H, _need(params, pre + "energy.intensity"), cfg.C)
    pp = PeriodicityParams(*(_need(params, pre + "period." + k) for k in ("alpha_raw", "w1", "b1", "w2", "b2")))
    return periodicity_encode(H, pp, cfg.C)


def block_components(x: Tensor, params: Mapping[str, Tensor], b: int, cfg: ModelConfig, force_zero=()) -> tuple[Tensor, dict]:
    """Pre-normed input H and the output of every enabled component of block ``b``."""
    pre = f"blocks.{b}."
    H = layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"], cfg.ln_eps)
    outputs = {c: component_output(c, H, params, b, cfg) for c in COMPONENTS if cfg.enabled(c)}
    for c in force_zero:
        if c in outputs:
            outputs[c] = Tensor(np.zeros(outputs[c].shape))
    return H, outputs


def block_fuse(x: Tensor, H: Tensor, outputs: Mapping[str, Tensor], params: Mapping[str, Tensor], b: int, cfg: ModelConfig) -> Tensor:
    """Residual plus the (gated) component outputs."""
    fused = x
    if cfg.gating == "none":
        for c in COMPONENTS:
            if c in outputs:
                fused = fused + outputs[c]
        return fused
    pre = f"blocks.{b}."
    g = gate_values(H, _need(params, pre + "gate.w"), _need(params, pre + "gate.b"), cfg.gating)
    for i, c in enumerate(COMPONENTS):
        if c in outputs:
            fused = fused + g[..., i : i + 1] * outputs[c]
    return fused


def block_mix(x: Tensor, params: Mapping[str, Tensor], b: int, cfg: ModelConfig, force_zero=()) -> Tensor:
    """Residual stream after the gated components of block ``b``, before its feed-forward half."""
    H, outputs = block_components(x, params, b, cfg, force_zero)
    return block_fuse(x, H, outputs, params, b, cfg)


def block_ffn(fused: Tensor, params: Mapping[str, Tensor], b: int, cfg: ModelConfig) -> Tensor:
    pre = f"blocks.{b}."
    h2 = layer_norm(fused, params[pre + "ln2.gain"], params[pre + "ln2.bias"], cfg.ln_eps)
    ff = matmul(gelu(matmul(h2, params[pre + "ffn.w1"]) + params[pre + "ffn.b1"]), params[pre + "ffn.w2"])
    return fused + (ff + params[pre + "ffn.b2"])


def block_forward(x: Tensor, params: Mapping[str, Tensor], b: int, cfg: ModelConfig, force_zero=()) -> Tensor:
    """One fusion block. ``force_zero`` names components whose output is replaced by zeros."""
    return block_ffn(block_mix(x, params, b, cfg, force_zero), params, b, cfg)


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if tokens.shape[-1] > cfg.n_max:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds n_max={cfg.n_max}")
    bad = np.argwhere((tokens < 0) | (tokens >= cfg.vocab_size))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise ValueError(f"token id {int(tokens[pos])} at position {pos} is outside [0, {cfg.vocab_size})")
    return tokens


def model_forward(tokens, params: Mapping[str, Tensor], cfg: ModelConfig, force_zero=()) -> Tensor:
    """Logits (..., n, vocab) for integer tokens (..., n)."""
    x = embed(tokens, params, cfg)
    for b in range(cfg.layers):
        x = block_forward(x, params, b, cfg, force_zero)
    return output_logits(x, params, cfg)


def embed(tokens, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    tokens = check_tokens(tokens, cfg)
    return take_rows(params["tok_emb"], tokens) + params["pos_emb"][: tokens.shape[-1]]


def output_logits(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Final norm followed by the head tied to the token embedding."""
    h = layer_norm(x, params["ln_f.gain"], params["ln_f.bias"], cfg.ln_eps)
    return matmul(h, swapaxes(params["tok_emb"], 0, 1))


def cross_entropy_loss(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean NLL over all target positions, plus the per-token losses."""
    return cross_entropy(logits, targets)


def sequence_loss(params: Mapping[str, Tensor], cfg: ModelConfig, batch, force_zero=()) -> tuple[Tensor, np.ndarray]:
    """Next-token loss on full sequences: predict ``batch[..., 1:]`` from ``batch[..., :-1]``."""
    batch = np.asarray(batch)
    logits = model_forward(batch[..., :-1], params, cfg, force_zero)
    return cross_entropy_loss(logits, batch[..., 1:])


def logits_np(tokens, params: Mapping[str, np.ndarray], cfg: ModelConfig, force_zero=()) -> np.ndarray:
    return model_forward(tokens, as_tensors(params), cfg, force_zero).data


def greedy_decode(prompt, params: Mapping[str, np.ndarray], cfg: ModelConfig, steps: int, force_zero=()) -> np.ndarray:
    """Extend (..., m) prompts by ``steps`` argmax tokens, recomputing the prefix each step."""
    seq = np.asarray(prompt)
    tp = as_tensors(params)
    for _ in range(steps):
        logits = model_forward(seq, tp, cfg, force_zero).data[..., -1, :]
        seq = np.concatenate([seq, np.argmax(logits, axis=-1)[..., None]], axis=-1)
    return seq
