"""Chunk spectra, EMA spectral memory and delayed one-step modulation.

For chunk ``i`` the magnitude spectrum ``A_i = |FFT(h_i)|`` is taken along
the time axis of each feature column. An EMA ``S_i = a*S_{i-1} + (1-a)*A_i``
with a per-feature decay ``a = 0.1 + 0.8*sigmoid(alpha_raw)`` carries spectral
history forward. Chunk ``i`` is modulated by ``M_i = 2*sigmoid(MLP(S_{i-1}))``,
elementwise; the first chunk has no history and passes through.

The MLP acts on each frequency row of ``S`` with weights shared across rows,
so parameter shapes do not depend on ``C``. With a zero second layer the
modulation is exactly 1 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mppa.energy import chunk_layout, chunk_sequence
from mppa.numerics import (
    Tensor,
    as_tensor,
    concat,
    fft_arrays,
    fft_magnitude,
    gelu,
    is_power_of_two,
    matmul,
    pad_axis,
    sigmoid,
    sigmoid_np,
    stack,
)


@dataclass
class PeriodicityParams:
    alpha_raw: Tensor  # (d,)
    w1: Tensor  # (d, d_h)
    b1: Tensor  # (d_h,)
    w2: Tensor  # (d_h, d)
    b2: Tensor  # (d,)

    def decay(self) -> Tensor:
        return 0.1 + 0.8 * sigmoid(self.alpha_raw)


def chunk_spectrum(chunk) -> np.ndarray:
    """Column-wise FFT magnitudes of a (C, d) chunk."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if not is_power_of_two(chunk.shape[0]):
        raise ValueError(f"chunk length must be a power of two, got {chunk.shape[0]}")
    cols = chunk.T
    re, im = fft_arrays(cols, np.zeros_like(cols))
    return np.sqrt(re * re + im * im).T


def ema_update(S_prev, A, alpha):
    """``alpha*S_prev + (1 - alpha)*A`` with ``alpha`` broadcast over frequency rows."""
    if isinstance(S_prev, Tensor) or isinstance(A, Tensor) or isinstance(alpha, Tensor):
        return alpha * as_tensor(S_prev) + (1.0 - as_tensor(alpha)) * A
    S_prev, A = np.asarray(S_prev, dtype=np.float64), np.asarray(A, dtype=np.float64)
    if S_prev.shape != A.shape:
        raise ValueError(f"EMA shape mismatch: {S_prev.shape} vs {A.shape}")
    return alpha * S_prev + (1.0 - alpha) * A


def modulation_map(S_prev, p: PeriodicityParams) -> Tensor:
    hidden = gelu(matmul(as_tensor(S_prev), p.w1) + p.b1)
    return 2.0 * sigmoid(matmul(hidden, p.w2) + p.b2)


def periodicity_encode(H, p: PeriodicityParams, C: int) -> Tensor:
    """Batched, differentiable periodicity pipeline over an (..., n, d) input."""
    H = as_tensor(H)
    if not is_power_of_two(C):
        raise ValueError(f"chunk size must be a power of two, got {C}")
    *lead, n, d = H.shape
    N = chunk_layout(n, C).N
    if N == 1:
        return H
    chunks = pad_axis(H, N * C - n, axis=-2).reshape(tuple(lead) + (N, C, d))
    # only spectra of chunks 0..N-2 ever reach an output
    spectra = fft_magnitude(chunks[..., : N - 1, :, :], axis=-2)
    alpha = p.decay()
    states = []
    S = Tensor(np.zeros(tuple(lead) + (C, d)))
    for i in range(N - 1):
        S = ema_update(S, spectra[..., i, :, :], alpha)
        states.append(S)
    M = modulation_map(stack(states, axis=-3), p)
    tail = chunks[..., 1:, :, :] * M
    out = concat([chunks[..., :1, :, :], tail], axis=-3).reshape(tuple(lead) + (N * C, d))
    return out[..., :n, :]


@dataclass
class PeriodicityState:
    """Streaming EMA spectrum; ``S`` stays all-zero until the first chunk is folded in."""

    S: np.ndarray | None = None
    chunks_seen: int = 0

    def step(self, chunk: np.ndarray, p: PeriodicityParams) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=np.float64)
        if self.S is None:
            self.S = np.zeros_like(chunk)
        out = chunk.copy() if self.chunks_seen == 0 else chunk * modulation_map(self.S, p).data
        A = chunk_spectrum(chunk)
        alpha = 0.1 + 0.8 * sigmoid_np(p.alpha_raw.data)
        self.S = ema_update(self.S, A, alpha)
        self.chunks_seen += 1
        return out


def periodicity_encode_stream(H: np.ndarray, p: PeriodicityParams, C: int) -> np.ndarray:
    """Chunk-at-a-time route through :class:`PeriodicityState` for one (n, d) sequence."""
    layout, chunks = chunk_sequence(H, C)
    state = PeriodicityState()
    outs = [state.step(c, p) for c in chunks]
    return np.concatenate(outs, axis=0)[: layout.n]
