"""Multi-head causal self-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mppa.numerics import Tensor, as_tensor, matmul, softmax, swapaxes


@dataclass(frozen=True)
class CausalMask:
    """Additive lower-triangular mask: 0 where ``j <= i``, -inf elsewhere."""

    n: int

    @property
    def admissible(self) -> np.ndarray:
        return np.tril(np.ones((self.n, self.n), dtype=bool))

    @property
    def additive(self) -> np.ndarray:
        return np.where(self.admissible, 0.0, -np.inf)


def build_causal_mask(n: int) -> CausalMask:
    if n < 1:
        raise ValueError("causal mask needs n >= 1")
    return CausalMask(n)


@dataclass
class AttentionParams:
    """Projection weights, each (d, d).

    Head ``h`` owns columns ``h*d_k:(h+1)*d_k`` of ``w_q``, ``w_k`` and
    ``w_v`` and rows ``h*d_k:(h+1)*d_k`` of ``w_o``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads:
            raise ValueError(f"width {d} is not divisible by {self.heads} heads")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return swapaxes(x.reshape(tuple(lead) + (n, heads, d // heads)), -3, -2)


def causal_attention(H, p: AttentionParams) -> Tensor:
    """Z for an (..., n, d) input; row i only sees rows 0..i."""
    H = as_tensor(H)
    n = H.shape[-2]
    q = _split_heads(matmul(H, p.w_q), p.heads)
    k = _split_heads(matmul(H, p.w_k), p.heads)
    v = _split_heads(matmul(H, p.w_v), p.heads)
    scores = matmul(q, swapaxes(k, -1, -2)) / np.sqrt(p.d_k)
    attn = softmax(scores, build_causal_mask(n).admissible)
    z = swapaxes(matmul(attn, v), -3, -2)
    z = z.reshape(z.shape[:-2] + (z.shape[-2] * z.shape[-1],))
    return matmul(z, p.w_o)


def attention_weights(H, p: AttentionParams) -> np.ndarray:
    """Per-head attention matrices, shape (..., heads, n, n)."""
    H = as_tensor(H)
    n = H.shape[-2]
    q = _split_heads(matmul(H, p.w_q), p.heads)
    k = _split_heads(matmul(H, p.w_k), p.heads)
    scores = matmul(q, swapaxes(k, -1, -2)) / np.sqrt(p.d_k)
    return softmax(scores, build_causal_mask(n).admissible).data
