"""Synthetic dynamical-system corpus: simulation, quantising tokenizer, dataset files.

Four systems are supported::

    harmonic     x'' = -omega^2 x
    damped       x'' = -gamma x' - omega^2 x
    van_der_pol  x'' = mu (1 - x^2) x' - x
    lorenz       x' = sigma (y - x),  y' = x (rho - z) - y,  z' = x y - beta z

all integrated with classical fixed-step RK4.

Token layout
------------
Token 0 is BOS and token 1 is SEP (also used as padding). Value tokens are
``2 + bin`` with ``bin = floor(bins * (v - vmin) / (vmax - vmin))`` after
clipping ``v`` into ``[vmin, vmax]``; the top edge maps to ``bins - 1``.
Channels are interleaved state by state (``x0 v0 x1 v1 ...``) after a leading
BOS. Decoding maps a bin to its centre.

Dataset files
-------------
``<path>``           one sequence per line, space-separated decimal token ids
``<path>.meta``      one JSON object per line: kind, parameters, initial state
``<path>.manifest``  ``key = value`` lines: seed, counts, per-kind tally,
                     tokenizer and integration settings
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from mppa.numerics import make_rng

KINDS = ("harmonic", "damped", "van_der_pol", "lorenz")
STATE_DIM = {"harmonic": 2, "damped": 2, "van_der_pol": 2, "lorenz": 3}
ENERGY_FLOOR = 1e-12


class SimulationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    initial: tuple
    dt: float
    steps: int
    omega: float = 1.0
    gamma: float = 0.0
    mu: float = 1.0
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if len(self.initial) != STATE_DIM[self.kind]:
            raise ValueError(f"{self.kind} needs a {STATE_DIM[self.kind]}-dimensional initial state")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if not 0 < self.omega <= 100:
            raise ValueError("omega must lie in (0, 100]")
        if not 0 <= self.gamma <= 10:
            raise ValueError("gamma must lie in [0, 10]")
        if not 0 <= self.mu <= 10:
            raise ValueError("mu must lie in [0, 10]")
        if min(self.sigma, self.rho, self.beta) <= 0:
            raise ValueError("Lorenz parameters must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, dim)


def _derivative(kind: str, s: np.ndarray, par: dict) -> np.ndarray:
    if kind == "lorenz":
        x, y, z = s[..., 0], s[..., 1], s[..., 2]
        return np.stack([par["sigma"] * (y - x), x * (par["rho"] - z) - y, x * y - par["beta"] * z], axis=-1)
    x, v = s[..., 0], s[..., 1]
    if kind == "harmonic":
        acc = -(par["omega"] ** 2) * x
    elif kind == "damped":
        acc = -par["gamma"] * v - (par["omega"] ** 2) * x
    else:
        acc = par["mu"] * (1.0 - x * x) * v - x
    return np.stack([v, acc], axis=-1)


def integrate_rk4(kind: str, initial: np.ndarray, par: dict, dt: float, steps: int) -> np.ndarray:
    """RK4 over a batch of initial states (B, dim); parameter values broadcast per row."""
    s = np.asarray(initial, dtype=np.float64)
    out = np.empty((steps + 1,) + s.shape)
    out[0] = s
    par = {k: np.asarray(v, dtype=np.float64) for k, v in par.items()}
    for i in range(1, steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as SimulationError
            k1 = _derivative(kind, s, par)
            k2 = _derivative(kind, s + 0.5 * dt * k1, par)
            k3 = _derivative(kind, s + 0.5 * dt * k2, par)
            k4 = _derivative(kind, s + dt * k3, par)
            s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(s).all():
            raise SimulationError(f"{kind} simulation became non-finite at step {i}")
        out[i] = s
    return out


def _par(spec: SystemSpec) -> dict:
    return {k: getattr(spec, k) for k in ("omega", "gamma", "mu", "sigma", "rho", "beta")}


def simulate(spec: SystemSpec) -> Trajectory:
    states = integrate_rk4(spec.kind, np.asarray(spec.initial, dtype=np.float64)[None], _par(spec), spec.dt, spec.steps)
    return Trajectory(np.arange(spec.steps + 1) * spec.dt, states[:, 0, :])


def mechanical_energy(states: np.ndarray, spec: SystemSpec) -> np.ndarray:
    if spec.kind == "lorenz":
        raise ValueError("the Lorenz system has no energy function")
    omega = 1.0 if spec.kind == "van_der_pol" else spec.omega
    x, v = states[..., 0], states[..., 1]
    return 0.5 * v * v + 0.5 * omega * omega * x * x


def energy_conservation_error(traj: Trajectory, spec: SystemSpec) -> float:
    """``max_t |E(t) - E(0)| / max(|E(0)|, eps)``."""
    energy = mechanical_energy(np.asarray(traj.states), spec)
    return float(np.max(np.abs(energy - energy[0])) / max(abs(energy[0]), ENERGY_FLOOR))


# -- tokenizer ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenizerSpec:
    value_min: float = -4.0
    value_max: float = 4.0
    bins: int = 62
    seq_len: int = 129
    channel_order: tuple = ()  # empty -> natural order
    reserved: tuple = ("BOS", "SEP")

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if not self.value_min < self.value_max:
            raise ValueError("value_min must be below value_max")

    @property
    def vocab_size(self) -> int:
        return self.bins + len(self.reserved)

    @property
    def bos(self) -> int:
        return self.reserved.index("BOS")

    @property
    def sep(self) -> int:
        return self.reserved.index("SEP")

    @property
    def offset(self) -> int:
        return len(self.reserved)

    @property
    def bin_width(self) -> float:
        return (self.value_max - self.value_min) / self.bins


def quantize(values, tok: TokenizerSpec) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), tok.value_min, tok.value_max)
    idx = np.floor(tok.bins * (v - tok.value_min) / (tok.value_max - tok.value_min)).astype(np.int64)
    return np.minimum(idx, tok.bins - 1)


def dequantize(bins, tok: TokenizerSpec) -> np.ndarray:
    return tok.value_min + (np.asarray(bins, dtype=np.float64) + 0.5) * tok.bin_width


def tokenize(states, tok: TokenizerSpec) -> np.ndarray:
    """BOS + interleaved channel tokens, truncated or SEP-padded to ``seq_len``."""
    states = np.asarray(states.states if isinstance(states, Trajectory) else states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    order = list(tok.channel_order) or list(range(states.shape[1]))
    body = quantize(states[:, order], tok).reshape(-1) + tok.offset
    seq = np.concatenate([[tok.bos], body])[: tok.seq_len]
    if seq.size < tok.seq_len:
        seq = np.concatenate([seq, np.full(tok.seq_len - seq.size, tok.sep)])
    return seq.astype(np.int64)


def detokenize(tokens, tok: TokenizerSpec, n_channels: int, fill: float = 0.0) -> np.ndarray:
    """Decode value tokens after the leading BOS into (steps, channels).

    Reserved tokens inside the body (e.g. a model predicting BOS mid-sequence)
    decode to ``fill``. A trailing partial state is dropped.
    """
    tokens = np.asarray(tokens)
    body = tokens[1:] if tokens.size and tokens[0] == tok.bos else tokens
    steps = body.size // n_channels
    body = body[: steps * n_channels]
    vals = np.where(body >= tok.offset, dequantize(body - tok.offset, tok), fill)
    vals = vals.reshape(steps, n_channels)
    order = list(tok.channel_order) or list(range(n_channels))
    out = np.empty_like(vals)
    out[:, order] = vals
    return out


# -- dataset files ----------------------------------------------------------------------------

# parameter ranges sampled uniformly per kind
PARAM_RANGES = {
    "harmonic": {"omega": (0.5, 2.0)},
    "damped": {"omega": (0.5, 2.0), "gamma": (0.05, 0.5)},
    "van_der_pol": {"mu": (0.5, 2.0)},
    "lorenz": {},
}
OBS_SCALE = {"harmonic": 1.0, "damped": 1.0, "van_der_pol": 1.0, "lorenz": 0.1}


@dataclass(frozen=True)
class DomainConfig:
    kinds: tuple = ("harmonic", "damped")
    num_sequences: int = 100
    dt: float = 0.05
    stride: int = 4  # RK4 steps between emitted samples
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ValueError(f"unknown or empty system kinds: {bad or self.kinds}")
        if self.num_sequences < 1 or self.stride < 1:
            raise ValueError("num_sequences and stride must be >= 1")

    def samples_for(self, kind: str) -> int:
        return math.ceil((self.tokenizer.seq_len - 1) / STATE_DIM[kind])


def sample_spec(domain: DomainConfig, seed: int, index: int) -> SystemSpec:
    rng = make_rng(seed, index)
    kind = domain.kinds[int(rng.integers(len(domain.kinds)))]
    kw = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES[kind].items()}
    if kind == "lorenz":
        initial = (float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)), float(rng.uniform(10, 30)))
    else:
        initial = (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
    steps = (domain.samples_for(kind) - 1) * domain.stride
    return SystemSpec(kind=kind, initial=initial, dt=domain.dt, steps=steps, **kw)


def observed_states(traj: Trajectory, spec: SystemSpec, domain: DomainConfig) -> np.ndarray:
    return traj.states[:: domain.stride] * OBS_SCALE[spec.kind]


def build_sequences(domain: DomainConfig, seed: int) -> tuple[np.ndarray, list[SystemSpec]]:
    """Token matrix (num_sequences, seq_len) and the SystemSpec behind each row."""
    specs = [sample_spec(domain, seed, i) for i in range(domain.num_sequences)]
    tokens = np.empty((len(specs), domain.tokenizer.seq_len), dtype=np.int64)
    # integrate all sequences of one kind together; rows are independent lanes
    for kind in domain.kinds:
        rows = [i for i, s in enumerate(specs) if s.kind == kind]
        if not rows:
            continue
        sub = [specs[i] for i in rows]
        par = {k: np.array([getattr(s, k) for s in sub]) for k in ("omega", "gamma", "mu", "sigma", "rho", "beta")}
        states = integrate_rk4(kind, np.array([s.initial for s in sub]), par, domain.dt, sub[0].steps)
        for j, i in enumerate(rows):
            traj = Trajectory(np.arange(sub[0].steps + 1) * domain.dt, states[:, j, :])
            tokens[i] = tokenize(observed_states(traj, specs[i], domain), domain.tokenizer)
    return tokens, specs


def _spec_record(index: int, spec: SystemSpec) -> str:
    rec = asdict(spec)
    rec["initial"] = list(spec.initial)
    rec["index"] = index
    rec["obs_scale"] = OBS_SCALE[spec.kind]
    return json.dumps(rec, sort_keys=True)


def generate_dataset(domain: DomainConfig, seed: int, path) -> dict:
    """Write the token file, its ``.meta`` sidecar and ``.manifest``; return the manifest."""
    path = os.fspath(path)
    tokens, specs = build_sequences(domain, seed)
    tally = {k: sum(s.kind == k for s in specs) for k in domain.kinds}
    tok = domain.tokenizer
    manifest = {
        "seed": seed,
        "count": len(specs),
        "kinds": ",".join(domain.kinds),
        **{f"tally.{k}": v for k, v in tally.items()},
        "dt": domain.dt,
        "stride": domain.stride,
        "tokenizer.value_min": tok.value_min,
        "tokenizer.value_max": tok.value_max,
        "tokenizer.bins": tok.bins,
        "tokenizer.seq_len": tok.seq_len,
        "tokenizer.vocab_size": tok.vocab_size,
        "tokenizer.reserved": ",".join(tok.reserved),
        "tokenizer.interleave": "state-major",
        **{f"obs_scale.{k}": OBS_SCALE[k] for k in domain.kinds},
        "data_file": os.path.basename(path),
        "meta_file": os.path.basename(path) + ".meta",
    }
    try:
        with open(path, "w", newline="\n") as fh:
            fh.writelines(" ".join(str(int(t)) for t in row) + "\n" for row in tokens)
        with open(path + ".meta", "w", newline="\n") as fh:
            fh.writelines(_spec_record(i, s) + "\n" for i, s in enumerate(specs))
        with open(path + ".manifest", "w", newline="\n") as fh:
            fh.writelines(f"{k} = {v}\n" for k, v in manifest.items())
    except OSError as exc:
        raise OSError(f"could not write dataset to {path}: {exc}") from exc
    return manifest


def read_dataset(path) -> tuple[np.ndarray, list[SystemSpec]]:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"could not read dataset {path}: {exc}") from exc
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"{path}: sequences have differing lengths {sorted(lengths)}")
    specs: list[SystemSpec] = []
    if os.path.exists(path + ".meta"):
        with open(path + ".meta") as fh:
            for line in fh:
                rec = json.loads(line)
                rec.pop("index")
                rec.pop("obs_scale")
                rec["initial"] = tuple(rec["initial"])
                specs.append(SystemSpec(**rec))
    return np.array(rows, dtype=np.int64), specs


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(os.fspath(path)) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out
