"""Dense float64 arithmetic, radix-2 FFT, reverse-mode gradients and seeded RNG.

Random streams come from numpy's PCG64 bit generator seeded through
``SeedSequence``; PCG64 output is specified bit-for-bit and identical on
every platform numpy supports.
"""

import numpy as np

from mppa.numerics.fft import ComplexVec, fft_arrays, fft_forward, fft_inverse, is_power_of_two
from mppa.numerics.gradcheck import analytic_gradients, grad_check, grad_check_report
from mppa.numerics.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    cumsum,
    exp,
    fft_magnitude,
    gelu,
    layer_norm,
    log,
    matmul,
    matmul_np,
    mean,
    pad_axis,
    sigmoid,
    sigmoid_np,
    softmax,
    softmax_np,
    stack,
    swapaxes,
    take_rows,
    tanh,
    transpose,
)


def make_rng(*seed: int) -> np.random.Generator:
    """PCG64 generator for a seed tuple, e.g. ``make_rng(run_seed, sequence_index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


def softmax_rows(scores, mask=None) -> np.ndarray:
    """Row softmax of a 2-D score array.

    ``mask`` is additive (0 or -inf) and ``scores`` may carry -inf sentinels
    of its own; those positions come out exactly 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    if mask is not None:
        s = s + np.asarray(mask, dtype=np.float64)
    if np.isnan(s).any() or np.isposinf(s).any():
        raise NonFiniteError("softmax scores must be finite or -inf")
    admissible = ~np.isneginf(s)
    return softmax_np(np.where(admissible, s, 0.0), admissible)


__all__ = [
    "ComplexVec",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "concat",
    "cross_entropy",
    "cumsum",
    "exp",
    "fft_arrays",
    "fft_forward",
    "fft_inverse",
    "fft_magnitude",
    "gelu",
    "analytic_gradients",
    "grad_check",
    "grad_check_report",
    "is_power_of_two",
    "layer_norm",
    "log",
    "make_rng",
    "matmul",
    "matmul_np",
    "mean",
    "pad_axis",
    "sigmoid",
    "sigmoid_np",
    "softmax",
    "softmax_np",
    "softmax_rows",
    "stack",
    "swapaxes",
    "take_rows",
    "tanh",
    "transpose",
]
