"""Chunked log-domain energy tracking with delayed two-step debt compensation.

A sequence is cut into chunks of ``C`` rows. Each chunk gets a mean energy
``E_i = mean_t log(1 + |h_t|^2)`` over its real (unpadded) rows, and a debt
``D_i = E_i - Ebar_i`` against the geometric mean ``Ebar_i`` of all earlier
chunk energies (``D_1 = 0``). Chunk ``i`` is then scaled by the single factor
``exp(sigmoid(D_{i-2}) * I)``; chunks 1 and 2 pass through unchanged.

Energies are measured on the uncompensated input, so a chunk's own scaling
never feeds back into its debt.

Two routes compute the same thing and are kept bit-identical: the batched
:func:`energy_encode` (differentiable, any leading batch axes) and the
streaming :class:`EnergyState`, which consumes one chunk at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mppa.numerics import Tensor, as_tensor, concat, cumsum, exp, log, pad_axis, sigmoid, sigmoid_np
from mppa.numerics._kernels import seq_sum

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class ChunkLayout:
    C: int
    N: int
    valid_len: tuple[int, ...]

    @property
    def n(self) -> int:
        return sum(self.valid_len)


def chunk_layout(n: int, C: int) -> ChunkLayout:
    if n < 1 or C < 1:
        raise ValueError(f"need n >= 1 and C >= 1, got n={n}, C={C}")
    N = math.ceil(n / C)
    valid = tuple(min(C, n - i * C) for i in range(N))
    return ChunkLayout(C, N, valid)


def chunk_sequence(H: np.ndarray, C: int) -> tuple[ChunkLayout, list[np.ndarray]]:
    """Split the rows of an (n, d) array into zero-padded (C, d) chunks."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError(f"expected an (n, d) array, got shape {H.shape}")
    layout = chunk_layout(H.shape[0], C)
    padded = np.zeros((layout.N * C, H.shape[1]))
    padded[: H.shape[0]] = H
    return layout, [padded[i * C : (i + 1) * C] for i in range(layout.N)]


def chunk_energy(chunk: np.ndarray, valid_len: int) -> float:
    if valid_len < 1:
        raise ValueError("chunk energy needs at least one valid row")
    chunk = np.asarray(chunk, dtype=np.float64)
    per_row = np.log(1.0 + seq_sum(chunk * chunk, axis=-1))
    return seq_sum(per_row[:valid_len]) / np.float64(valid_len)


@dataclass
class EnergyParams:
    intensity: Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class EnergyState:
    """Streaming state: running log-energy sum, chunk counter, debt queue."""

    L: np.float64 = field(default_factory=lambda: np.float64(0.0))
    chunks_seen: int = 0
    debt_queue: list = field(default_factory=list)

    def debt_two_back(self):
        return self.debt_queue[-2] if len(self.debt_queue) >= 2 else None

    def record(self, energy, eps: float = DEFAULT_EPS) -> np.float64:
        if self.chunks_seen == 0:
            debt = np.float64(0.0)
        else:
            debt = compute_debt(energy, geometric_mean_energy(self, eps))
        self.debt_queue.append(debt)
        self.L = self.L + np.log(energy + eps) if self.chunks_seen else np.log(energy + eps)
        self.chunks_seen += 1
        return debt

    def step(self, chunk: np.ndarray, valid_len: int, intensity, eps: float = DEFAULT_EPS) -> np.ndarray:
        """Compensate one chunk, then fold its energy into the state."""
        out = apply_compensation(chunk, self.debt_two_back(), intensity)
        self.record(chunk_energy(chunk, valid_len), eps)
        return out


def geometric_mean_energy(state: EnergyState, eps: float = DEFAULT_EPS) -> np.float64:
    del eps  # already folded into state.L
    if state.chunks_seen < 1:
        raise ValueError("geometric mean energy requested before any chunk was seen")
    return np.exp(state.L / np.float64(state.chunks_seen))


def compute_debt(E_current, E_mean) -> np.float64:
    return np.float64(E_current) - np.float64(E_mean)


def compensation_factor(debt, intensity) -> np.float64:
    return np.exp(sigmoid_np(debt) * np.float64(intensity))


def apply_compensation(chunk: np.ndarray, debt_two_back, intensity) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    if debt_two_back is None:
        return chunk.copy()
    factor = compensation_factor(debt_two_back, intensity)
    if not np.isfinite(factor):
        raise FloatingPointError(f"compensation factor is not finite (debt={debt_two_back})")
    return chunk * factor


def energy_encode(H, intensity, C: int, eps: float = DEFAULT_EPS) -> Tensor:
    """Batched, differentiable energy pipeline over an (..., n, d) input."""
    H = as_tensor(H)
    intensity = as_tensor(intensity)
    *lead, n, d = H.shape
    layout = chunk_layout(n, C)
    N = layout.N
    if N <= 2:
        return H
    chunks = pad_axis(H, N * C - n, axis=-2).reshape(tuple(lead) + (N, C, d))
    per_row = log(1.0 + (chunks * chunks).sum(axis=-1))
    energy = per_row.sum(axis=-1) / np.array(layout.valid_len, dtype=np.float64)
    running = cumsum(log(energy + eps), axis=-1)
    mean_prev = exp(running[..., : N - 1] / np.arange(1, N, dtype=np.float64))
    debts = energy[..., 1 : N - 1] - mean_prev[..., : N - 2]
    # factor for chunk i (0-based, i >= 2) uses D of chunk i-2; D of chunk 0 is 0
    delayed = concat([Tensor(np.zeros(tuple(lead) + (1,))), debts[..., : N - 3]], axis=-1)
    factors = exp(sigmoid(delayed) * intensity)
    head = chunks[..., :2, :, :]
    tail = chunks[..., 2:, :, :] * factors.reshape(tuple(lead) + (N - 2, 1, 1))
    out = concat([head, tail], axis=-3).reshape(tuple(lead) + (N * C, d))
    return out[..., :n, :]


def energy_encode_stream(H: np.ndarray, intensity, C: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Chunk-at-a-time route through :class:`EnergyState` for one (n, d) sequence."""
    layout, chunks = chunk_sequence(H, C)
    state = EnergyState()
    outs = [state.step(c, v, intensity, eps) for c, v in zip(chunks, layout.valid_len)]
    return np.concatenate(outs, axis=0)[: layout.n]
