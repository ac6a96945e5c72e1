"""Compiled inner loops with a fixed floating-point evaluation order.

Every output element of :func:`bmm` is accumulated as
``((0 + a0*b0) + a1*b1) + ...`` left to right over the contracted index, with
no fused multiply-add and no reassociation. That is what lets the causality
audits demand exact equality: a prefix row never sees a different summation
tree because of what happens to later rows or to the sequence length.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _bmm_kernel(a, b, out):
    nb, m, kk = a.shape
    p = b.shape[2]
    for t in range(nb):
        for i in range(m):
            for j in range(p):
                out[t, i, j] = 0.0
            for k in range(kk):
                aik = a[t, i, k]
                for j in range(p):
                    out[t, i, j] += aik * b[t, k, j]
    return out


@numba.njit(cache=True)
def _mm_shared_kernel(a, b, out):
    m, kk = a.shape
    p = b.shape[1]
    for i in range(m):
        for j in range(p):
            out[i, j] = 0.0
        for k in range(kk):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


def mm2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    return _mm_shared_kernel(a, b, out)


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched product of (B, m, k) and (B, k, p) arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.float64)
    return _bmm_kernel(a, b, out)


def seq_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Left-to-right sum along ``axis``.

    ``np.sum`` switches to pairwise summation on contiguous axes, whose
    grouping depends on the length; a running accumulation does not.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        return np.sum(x, axis=axis, keepdims=keepdims)
    acc = np.cumsum(x, axis=axis)
    out = np.take(acc, [-1], axis=axis)
    return out if keepdims else np.squeeze(out, axis=axis)
