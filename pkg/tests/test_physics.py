import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mppa.physics import (
    DomainConfig,
    SimulationError,
    SystemSpec,
    TokenizerSpec,
    Trajectory,
    build_sequences,
    detokenize,
    energy_conservation_error,
    generate_dataset,
    integrate_rk4,
    mechanical_energy,
    quantize,
    read_dataset,
    read_manifest,
    sample_spec,
    simulate,
    tokenize,
)

HARMONIC = SystemSpec("harmonic", (1.0, 0.0), dt=1e-3, steps=1000, omega=2 * math.pi)


def test_harmonic_returns_after_one_period():
    traj = simulate(HARMONIC)
    assert np.max(np.abs(traj.states[-1] - [1.0, 0.0])) < 1e-6
    assert abs(traj.times[-1] - 1.0) < 1e-12


def test_harmonic_conserves_energy():
    assert energy_conservation_error(simulate(HARMONIC), HARMONIC) < 1e-6


def test_damped_energy_decays_monotonically():
    spec = SystemSpec("damped", (1.0, 0.0), dt=1e-2, steps=2000, omega=1.5, gamma=0.1)
    traj = simulate(spec)
    E = mechanical_energy(traj.states, spec)
    assert energy_conservation_error(traj, spec) > 0
    assert np.all(np.diff(E) <= 0)


def test_damped_envelope_strictly_decreasing():
    spec = SystemSpec("damped", (1.0, 0.0), dt=1e-2, steps=3000, omega=2.0, gamma=0.2)
    x = simulate(spec).states[:, 0]
    peaks = [abs(x[i]) for i in range(1, len(x) - 1) if abs(x[i]) >= abs(x[i - 1]) and abs(x[i]) > abs(x[i + 1])]
    assert len(peaks) > 5 and np.all(np.diff(peaks) < 0)


def test_van_der_pol_limit_cycle():
    spec = SystemSpec("van_der_pol", (0.1, 0.0), dt=1e-2, steps=10000, mu=1.0)
    x = simulate(spec).states[5000:, 0]
    assert np.all(np.abs(x) < 3)
    amplitude = 0.5 * (x.max() - x.min())
    assert abs(amplitude - 2.0) < 0.2


def test_lorenz_runs_and_has_no_energy():
    spec = SystemSpec("lorenz", (1.0, 1.0, 20.0), dt=0.01, steps=500)
    traj = simulate(spec)
    assert traj.states.shape == (501, 3) and np.isfinite(traj.states).all()
    with pytest.raises(ValueError):
        energy_conservation_error(traj, spec)


def test_constructed_energy_doubling():
    spec = SystemSpec("harmonic", (1.0, 0.0), dt=0.1, steps=2, omega=1.0)
    traj = Trajectory(np.array([0.0, 0.1]), np.array([[1.0, 0.0], [math.sqrt(2), 0.0]]))
    assert abs(energy_conservation_error(traj, spec) - 1.0) < 1e-15


def test_batched_lanes_match_single_runs():
    initial = np.array([[1.0, 0.0], [0.2, -0.5], [-0.7, 0.3]])
    par = {"omega": np.array([0.5, 1.0, 1.7]), "gamma": np.array([0.1, 0.2, 0.3])}
    batched = integrate_rk4("damped", initial, par, 0.05, 40)
    for i in range(3):
        single = integrate_rk4("damped", initial[i : i + 1], {k: v[i] for k, v in par.items()}, 0.05, 40)
        assert np.array_equal(batched[:, i], single[:, 0])


def test_divergence_names_the_step():
    with pytest.raises(SimulationError, match="step"):
        integrate_rk4("van_der_pol", np.array([[1e80, 1e80]]), {"mu": np.array(10.0)}, 1.0, 10)


@pytest.mark.parametrize(
    "kw",
    [dict(dt=0.0), dict(steps=1), dict(omega=-1.0), dict(gamma=-0.1), dict(kind="pendulum"), dict(initial=(1.0,))],
)
def test_invalid_specs(kw):
    base = dict(kind="damped", initial=(1.0, 0.0), dt=0.1, steps=10)
    with pytest.raises(ValueError):
        SystemSpec(**{**base, **kw})


# -- tokenizer ----------------------------------------------------------------------------


def test_range_endpoints():
    tok = TokenizerSpec()
    assert quantize([tok.value_min, tok.value_max], tok).tolist() == [0, tok.bins - 1]


def test_two_bin_threshold():
    tok = TokenizerSpec(value_min=-1.0, value_max=1.0, bins=2)
    assert quantize([-1e-12, 1e-12], tok).tolist() == [0, 1]


def test_out_of_range_values_clip():
    tok = TokenizerSpec()
    assert quantize([-100.0, 100.0], tok).tolist() == [0, tok.bins - 1]


def test_layout_bos_interleave_and_padding():
    tok = TokenizerSpec(value_min=0.0, value_max=4.0, bins=4, seq_len=8)
    seq = tokenize(np.array([[0.5, 1.5], [2.5, 3.5]]), tok)
    assert seq.tolist() == [0, 2, 3, 4, 5, 1, 1, 1]
    assert tok.vocab_size == 6


def test_truncation():
    tok = TokenizerSpec(seq_len=4)
    assert tokenize(np.zeros((10, 2)), tok).size == 4


def test_invalid_tokenizer():
    with pytest.raises(ValueError):
        TokenizerSpec(bins=1)
    with pytest.raises(ValueError):
        TokenizerSpec(value_min=1.0, value_max=1.0)


@settings(max_examples=50, deadline=None)
@given(
    values=st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=40),
    bins=st.integers(2, 200),
)
def test_round_trip_within_one_bin(values, bins):
    tok = TokenizerSpec(bins=bins, seq_len=1 + len(values))
    states = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    back = detokenize(tokenize(states, tok), tok, 2)
    clipped = np.clip(states, tok.value_min, tok.value_max)
    assert back.shape == states.shape
    assert np.all(np.abs(back - clipped) <= tok.bin_width)


def test_channel_order_round_trip():
    tok = TokenizerSpec(channel_order=(1, 0), seq_len=7)
    states = np.array([[0.1, -2.0], [1.0, 3.0], [-0.5, 0.5]])
    seq = tokenize(states, tok)
    assert seq[1] == quantize(-2.0, tok) + 2
    assert np.all(np.abs(detokenize(seq, tok, 2) - states) <= tok.bin_width)


# -- dataset files ------------------------------------------------------------------------


def domain(n=100, kinds=("harmonic", "damped"), seq_len=65):
    return DomainConfig(kinds=kinds, num_sequences=n, tokenizer=TokenizerSpec(seq_len=seq_len))


def test_dataset_bytes_are_reproducible(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    generate_dataset(domain(), 42, a)
    generate_dataset(domain(), 42, b)
    for suffix in ("", ".meta"):
        assert (tmp_path / f"a.txt{suffix}").read_bytes() == (tmp_path / f"b.txt{suffix}").read_bytes()


def test_train_and_val_seeds_do_not_collide():
    train, _ = build_sequences(domain(), 88)
    val, _ = build_sequences(domain(), 42)
    rows = {tuple(r) for r in train}
    assert not any(tuple(r) in rows for r in val)


def test_manifest_tally_partitions_count(tmp_path):
    path = tmp_path / "d.txt"
    manifest = generate_dataset(domain(kinds=("harmonic", "damped", "van_der_pol", "lorenz")), 3, path)
    tally = sum(v for k, v in manifest.items() if k.startswith("tally."))
    assert tally == manifest["count"] == 100
    on_disk = read_manifest(str(path) + ".manifest")
    assert on_disk["seed"] == "3" and on_disk["tokenizer.vocab_size"] == "64"


def test_read_back(tmp_path):
    path = tmp_path / "d.txt"
    dom = domain(n=12)
    generate_dataset(dom, 5, path)
    tokens, specs = read_dataset(path)
    expect, expect_specs = build_sequences(dom, 5)
    assert np.array_equal(tokens, expect) and specs == expect_specs


def test_sequences_decode_to_their_simulation():
    dom = domain(n=4, seq_len=33)
    tokens, specs = build_sequences(dom, 9)
    for row, spec in zip(tokens, specs):
        states = simulate(spec).states[:: dom.stride]
        decoded = detokenize(row, dom.tokenizer, 2)
        assert np.all(np.abs(decoded - np.clip(states[: len(decoded)], -4, 4)) <= dom.tokenizer.bin_width)


def test_specs_are_independent_of_dataset_size():
    small, large = domain(n=5), domain(n=50)
    assert [sample_spec(small, 1, i) for i in range(5)] == [sample_spec(large, 1, i) for i in range(5)]


def test_unknown_kind():
    with pytest.raises(ValueError):
        DomainConfig(kinds=("pendulum",))
