"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from mppa.numerics.tensor import NonFiniteError, Tensor


def _evaluate(loss_fn, arrays: Mapping[str, np.ndarray]) -> float:
    value = loss_fn({k: Tensor(v) for k, v in arrays.items()})
    value = float(value.data if isinstance(value, Tensor) else value)
    if not np.isfinite(value):
        raise NonFiniteError("loss is not finite at a probe point")
    return value


def analytic_gradients(loss_fn, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = loss_fn(leaves)
    loss.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def grad_check_report(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    skip: Callable[[str, tuple], bool] | None = None,
    grads: Mapping[str, np.ndarray] | None = None,
) -> dict[str, tuple[float, tuple]]:
    """Worst relative error and its coordinate for every named tensor.

    The error of one coordinate is ``|a - c| / max(1, |a| + |c|)`` for analytic
    ``a`` and central difference ``c``: relative for large gradients, absolute
    for small ones.
    ``skip(name, index)`` can exclude coordinates (e.g. exact-zero FFT bins).
    Analytic gradients come from ``loss_fn`` unless ``grads`` supplies them.
    """
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    if grads is None:
        grads = analytic_gradients(loss_fn, arrays)
    report = {}
    for name, arr in arrays.items():
        worst, where = 0.0, ()
        flat = arr.reshape(-1)
        for i in range(flat.size):
            idx = np.unravel_index(i, arr.shape)
            if skip is not None and skip(name, idx):
                continue
            orig = flat[i]
            hi, lo = orig + h, orig - h
            flat[i] = hi
            up = _evaluate(loss_fn, arrays)
            flat[i] = lo
            down = _evaluate(loss_fn, arrays)
            flat[i] = orig
            # divide by the step actually taken: orig +/- h is rounded
            numeric = (up - down) / (hi - lo)
            a = grads[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            if not where or err > worst:
                worst, where = err, tuple(int(j) for j in idx)
        report[name] = (worst, where)
    return report


def grad_check(loss_fn, params, h: float = 1e-6) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``params`` is either one array or a mapping of named arrays; ``loss_fn``
    receives the same structure as Tensors and returns a scalar Tensor.
    """
    if isinstance(params, Mapping):
        report = grad_check_report(loss_fn, params, h)
    else:
        report = grad_check_report(lambda d: loss_fn(d["p"]), {"p": np.asarray(params, dtype=np.float64)}, h)
    return max((err for err, _ in report.values()), default=0.0)
