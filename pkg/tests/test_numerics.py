import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mppa import numerics as nx
from mppa.numerics import (
    ComplexVec,
    NonFiniteError,
    Tensor,
    fft_forward,
    fft_inverse,
    grad_check,
    make_rng,
    matmul_np,
    softmax_rows,
)
from mppa.numerics._kernels import bmm, seq_sum
from oracles import matmul_loop, naive_dft

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


# -- matmul ---------------------------------------------------------------------------


def test_matmul_identity():
    b = make_rng(0).standard_normal((3, 4))
    assert np.array_equal(matmul_np(np.eye(3), b), b)


def test_matmul_hand_arithmetic():
    out = matmul_np(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert out.tolist() == [[2.0], [4.0]]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_matmul_matches_triple_loop_to_zero_ulp(seed):
    rng = make_rng(seed)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.array_equal(matmul_np(a, b), matmul_loop(a, b))


def test_batched_matmul_matches_per_slice_loop():
    rng = make_rng(4)
    a, b = rng.standard_normal((3, 4, 6)), rng.standard_normal((3, 6, 2))
    out = bmm(a, b)
    for i in range(3):
        assert np.array_equal(out[i], matmul_loop(a[i], b[i]))


def test_matmul_rows_independent_of_other_rows():
    rng = make_rng(5)
    a, b = rng.standard_normal((9, 16)), rng.standard_normal((16, 5))
    assert np.array_equal(matmul_np(a, b)[:4], matmul_np(a[:4], b))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul_np(np.ones((2, 3)), np.ones((4, 2)))


def test_seq_sum_is_left_to_right():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    assert seq_sum(x) == ((1e16 + 1.0) - 1e16) + 1.0


# -- softmax ----------------------------------------------------------------------------


def test_softmax_uniform_row():
    assert np.allclose(softmax_rows(np.zeros((1, 3))), 1 / 3, rtol=0, atol=1e-16)


def test_softmax_single_unmasked_entry():
    out = softmax_rows(np.array([[0.0, -np.inf, -np.inf]]))
    assert out.tolist() == [[1.0, 0.0, 0.0]]


def test_softmax_matches_direct_formula():
    row = np.array([1.0, 2.0, 3.0])
    direct = np.exp(row) / np.exp(row).sum()
    assert np.max(np.abs(softmax_rows(row[None])[0] - direct)) < 1e-15


def test_softmax_additive_mask():
    mask = np.array([[0.0, -np.inf], [0.0, 0.0]])
    out = softmax_rows(np.array([[5.0, 9.0], [0.0, 0.0]]), mask)
    assert out[0].tolist() == [1.0, 0.0] and np.allclose(out[1], 0.5)


def test_softmax_fully_masked_row_is_an_error():
    with pytest.raises(ValueError, match="masked"):
        softmax_rows(np.array([[-np.inf, -np.inf]]))


@given(st.lists(finite, min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = softmax_rows(np.array([values]))
    assert abs(out.sum() - 1.0) < 1e-12 and (out >= 0).all()


# -- fft --------------------------------------------------------------------------------


def test_fft_constant_signal():
    mag = fft_forward(ComplexVec.from_real(np.full(8, 1.5))).abs()
    assert abs(mag[0] - 12.0) < 1e-12 and np.max(mag[1:]) < 1e-12


def test_fft_single_tone():
    t = np.arange(8)
    mag = fft_forward(ComplexVec.from_real(np.cos(2 * np.pi * 2 * t / 8))).abs()
    expect = np.zeros(8)
    expect[[2, 6]] = 4.0
    assert np.max(np.abs(mag - expect)) < 1e-12


@pytest.mark.parametrize("C", [2, 4, 8, 16, 32])
def test_fft_matches_naive_dft(C):
    rng = make_rng(7, C)
    x = rng.standard_normal(C) + 1j * rng.standard_normal(C)
    X = fft_forward(ComplexVec(x.real, x.imag))
    assert np.max(np.abs((X.re + 1j * X.im) - naive_dft(x))) < 1e-9


@pytest.mark.parametrize("C", [1, 8, 64])
def test_fft_inverse_round_trip(C):
    rng = make_rng(8, C)
    x = ComplexVec(rng.standard_normal(C), rng.standard_normal(C))
    back = fft_inverse(fft_forward(x))
    assert max(np.max(np.abs(back.re - x.re)), np.max(np.abs(back.im - x.im))) < 1e-12


@pytest.mark.parametrize("C", [0, 3, 12])
def test_fft_rejects_non_power_of_two(C):
    with pytest.raises(ValueError):
        fft_forward(ComplexVec.from_real(np.ones(C)))


def test_fft_is_deterministic():
    x = ComplexVec.from_real(make_rng(9).standard_normal(32))
    a, b = fft_forward(x), fft_forward(x)
    assert np.array_equal(a.re, b.re) and np.array_equal(a.im, b.im)


# -- gradients ------------------------------------------------------------------------


def test_grad_check_quadratic():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (p * p).sum().backward()
    assert p.grad.tolist() == [2.0, 4.0]
    assert grad_check(lambda q: (q * q).sum(), np.array([1.0, 2.0])) < 1e-10


def test_grad_check_sigmoid_scalar():
    p = Tensor(np.array(0.0), requires_grad=True)
    nx.sigmoid(p).backward()
    assert p.grad == 0.25
    assert grad_check(lambda q: nx.sigmoid(q), np.array(0.0)) < 1e-8


UNARY = {
    "exp": nx.exp,
    "log": lambda t: nx.log(t * t + 0.5),
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "gelu": nx.gelu,
    "softmax": lambda t: nx.softmax(t) * Tensor(np.arange(1.0, t.shape[-1] + 1)),
    "cumsum": lambda t: nx.cumsum(t) * t,
    "mean": lambda t: nx.mean(t * t, axis=-1, keepdims=True) * t,
    "fft_magnitude": lambda t: nx.fft_magnitude(t, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(values=st.lists(finite, min_size=8, max_size=8))
def test_unary_gradients_match_central_differences(name, values):
    x = np.array(values).reshape(2, 4)
    if name == "fft_magnitude":
        # |X_k| is not differentiable where it vanishes
        x = x + np.array([1.0, 0.3, -0.2, 0.1])
        if np.min(np.abs(np.fft.fft(x, axis=-1))) < 1e-3:
            return
    weights = make_rng(1).standard_normal((2, 4))
    assert grad_check(lambda t: (UNARY[name](t) * Tensor(weights)).sum(), x) < 1e-5


def test_composite_gradients():
    rng = make_rng(2)
    params = {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal((4, 5)),
        "g": rng.standard_normal(5),
        "beta": rng.standard_normal(5),
    }
    mask = np.tril(np.ones((3, 3), dtype=bool))

    def loss(p):
        h = nx.layer_norm(nx.matmul(p["a"], p["b"]), p["g"], p["beta"])
        att = nx.softmax(nx.matmul(h, nx.swapaxes(h, 0, 1)), mask)
        out, _ = nx.cross_entropy(nx.matmul(att, h), np.array([0, 3, 1]))
        return out

    assert grad_check(loss, params) < 1e-5


def test_log_of_nonpositive_is_an_error():
    with pytest.raises(NonFiniteError):
        nx.log(Tensor(np.array([1.0, 0.0])))


def test_nonfinite_results_are_rejected():
    with pytest.raises(NonFiniteError):
        nx.exp(Tensor(np.array([1000.0])))


def test_cross_entropy_uniform_logits():
    V = 64
    loss, per = nx.cross_entropy(Tensor(np.zeros((5, V))), np.arange(5))
    assert abs(loss.item() - math.log(V)) < 1e-12
    assert abs(math.exp(loss.item()) - V) < 1e-9


def test_cross_entropy_confident_correct():
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), [1, 2, 3]] = 50.0
    loss, _ = nx.cross_entropy(Tensor(logits), np.array([1, 2, 3]))
    assert loss.item() < 1e-30


def test_cross_entropy_matches_log_softmax():
    rng = make_rng(8)
    logits, targets = rng.standard_normal((6, 10)), rng.integers(10, size=6)
    _, per = nx.cross_entropy(Tensor(logits), targets)
    z = logits - logits.max(-1, keepdims=True)
    expect = -(z - np.log(np.exp(z).sum(-1, keepdims=True)))[np.arange(6), targets]
    assert np.max(np.abs(per - expect)) < 1e-12


def test_rng_is_reproducible_and_seed_sensitive():
    a = make_rng(3, 1).standard_normal(4)
    assert np.array_equal(a, make_rng(3, 1).standard_normal(4))
    assert not np.array_equal(a, make_rng(3, 2).standard_normal(4))
