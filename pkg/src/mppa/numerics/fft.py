"""Iterative radix-2 Cooley-Tukey FFT on split real/imaginary arrays.

The transform always runs along the last axis and is vectorised over all
leading axes, so a (..., d, C) block of feature columns is transformed in one
call. Only power-of-two lengths are supported.
"""

from dataclasses import dataclass

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ComplexVec:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape:
            raise ValueError(f"re/im shape mismatch: {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    def __len__(self):
        return self.re.shape[-1]

    def abs(self) -> np.ndarray:
        return np.sqrt(self.re * self.re + self.im * self.im)

    @classmethod
    def from_real(cls, x) -> "ComplexVec":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.zeros_like(x))


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


_TWIDDLES: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _twiddles(m: int) -> tuple[np.ndarray, np.ndarray]:
    # exp(-2*pi*i*k/m) for k < m/2
    if m not in _TWIDDLES:
        ang = -2.0 * np.pi * np.arange(m // 2) / m
        _TWIDDLES[m] = (np.cos(ang), np.sin(ang))
    return _TWIDDLES[m]


def fft_arrays(re: np.ndarray, im: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised forward DFT along the last axis."""
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    n = re.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    rev = _bit_reverse(n)
    xr = re[..., rev].copy()
    xi = im[..., rev].copy()
    lead = xr.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        wr, wi = _twiddles(m)
        # view as (..., n/m blocks, 2 halves, half)
        vr = xr.reshape(lead + (n // m, 2, half))
        vi = xi.reshape(lead + (n // m, 2, half))
        ur, ui = vr[..., 0, :].copy(), vi[..., 0, :].copy()
        br, bi = vr[..., 1, :], vi[..., 1, :]
        tr = br * wr - bi * wi
        ti = br * wi + bi * wr
        vr[..., 0, :] = ur + tr
        vi[..., 0, :] = ui + ti
        vr[..., 1, :] = ur - tr
        vi[..., 1, :] = ui - ti
        m *= 2
    return xr, xi


def fft_forward(x: ComplexVec) -> ComplexVec:
    return ComplexVec(*fft_arrays(x.re, x.im))


def fft_inverse(x: ComplexVec) -> ComplexVec:
    n = len(x)
    re, im = fft_arrays(x.re, -x.im)
    return ComplexVec(re / n, -im / n)

