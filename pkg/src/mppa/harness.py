"""Training, evaluation, ablation, causality audits and gradient checks."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from mppa.checkpoint import load_checkpoint, save_checkpoint
from mppa.config import RunConfig
from mppa.energy import energy_encode
from mppa.model import (
    COMPONENTS,
    ModelConfig,
    as_tensors,
    block_components,
    block_ffn,
    block_forward,
    block_fuse,
    component_output,
    cross_entropy_loss,
    embed,
    greedy_decode,
    init_params,
    logits_np,
    output_logits,
    sequence_loss,
)
from mppa.numerics import NonFiniteError, Tensor, analytic_gradients, grad_check_report, make_rng
from mppa.numerics._kernels import seq_sum
from mppa.periodicity import PeriodicityParams, periodicity_encode
from mppa.physics import (
    OBS_SCALE,
    STATE_DIM,
    SystemSpec,
    TokenizerSpec,
    Trajectory,
    detokenize,
    energy_conservation_error,
    read_dataset,
)
from mppa.optim import AdamW, warmup_cosine_lr

log = logging.getLogger(__name__)

AUDIT_TOLERANCE = 1e-10
GRAD_TOLERANCE = 1e-5


class TrainingError(RuntimeError):
    pass


class MismatchError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    variant: str = "full"
    disabled: tuple = ()
    gating: str = "causal_prefix"
    train_loss: float | None = None
    val_loss: float | None = None
    val_perplexity: float | None = None
    per_kind_perplexity: dict = field(default_factory=dict)
    per_kind_tokens: dict = field(default_factory=dict)
    trajectory_mse: float | None = None
    energy_error: float | None = None
    wall_seconds: float | None = None

    # wall-clock time is logged, never written: metrics files must be byte-reproducible
    FILE_FIELDS = (
        "step",
        "variant",
        "disabled",
        "gating",
        "train_loss",
        "val_loss",
        "val_perplexity",
        "per_kind_perplexity",
        "per_kind_tokens",
        "trajectory_mse",
        "energy_error",
    )

    def to_json(self) -> str:
        rec = {}
        for k in self.FILE_FIELDS:
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = {kk: v[kk] for kk in sorted(v)}
            rec[k] = v
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        rec = json.loads(line)
        rec["disabled"] = tuple(rec["disabled"])
        return cls(**rec)


def read_metrics(path) -> list[MetricsRecord]:
    with open(os.fspath(path)) as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]


# -- data ---------------------------------------------------------------------------------


def load_split(path: str, cfg: ModelConfig, seq_len: int) -> tuple[np.ndarray, list[SystemSpec]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    tokens, specs = read_dataset(path)
    if tokens.shape[1] != seq_len:
        raise ValueError(f"{path}: sequences have length {tokens.shape[1]}, config expects {seq_len}")
    if tokens.max() >= cfg.vocab_size:
        raise ValueError(f"{path}: token id {int(tokens.max())} exceeds vocab_size={cfg.vocab_size}")
    return tokens, specs


# -- evaluation ---------------------------------------------------------------------------


def per_token_losses(params, cfg: ModelConfig, tokens: np.ndarray, batch: int = 50, force_zero=()) -> np.ndarray:
    tp = as_tensors(params)
    out = []
    for start in range(0, len(tokens), batch):
        _, per = sequence_loss(tp, cfg, tokens[start : start + batch], force_zero)
        out.append(per)
    return np.concatenate(out, axis=0)


def _completion_metrics(params, cfg, tokens, specs, tok: TokenizerSpec, count: int, force_zero=()):
    """Greedy-decode the second half of sequences and score the decoded states."""
    chosen = [i for i, s in enumerate(specs) if s.kind != "lorenz"][:count]
    if not chosen:
        return None, None
    ch = STATE_DIM[specs[chosen[0]].kind]
    states_total = (tokens.shape[1] - 1) // ch
    prompt_states = states_total // 2
    prompt_len = 1 + ch * prompt_states
    sub = tokens[chosen]
    decoded = greedy_decode(sub[:, :prompt_len], params, cfg, tokens.shape[1] - 1 - prompt_len, force_zero)
    mses, errors = [], []
    for row, true_row, i in zip(decoded, sub, chosen):
        pred = detokenize(row, tok, ch)[prompt_states:]
        true = detokenize(true_row[: row.size], tok, ch)[prompt_states:]
        mses.append(float(np.mean((pred - true) ** 2)))
        spec = specs[i]
        traj = Trajectory(np.arange(len(pred), dtype=np.float64), pred / OBS_SCALE[spec.kind])
        errors.append(energy_conservation_error(traj, spec))
    return float(np.mean(mses)), float(np.mean(errors))


def evaluate_arrays(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    tokens: np.ndarray,
    specs: list[SystemSpec],
    tok: TokenizerSpec | None = None,
    completions: int = 0,
    force_zero=(),
    step: int = 0,
    variant: str = "full",
) -> MetricsRecord:
    t0 = time.perf_counter()
    per = per_token_losses(params, cfg, tokens, force_zero=force_zero)
    loss = float(seq_sum(per.reshape(-1)) / per.size)
    per_kind, per_kind_tokens = {}, {}
    if specs:
        kinds = np.array([s.kind for s in specs])
        for k in sorted(set(kinds)):
            rows = per[kinds == k]
            per_kind[k] = math.exp(float(seq_sum(rows.reshape(-1)) / rows.size))
            per_kind_tokens[k] = int(rows.size)
    mse = energy = None
    if completions and specs and tok is not None:
        mse, energy = _completion_metrics(params, cfg, tokens, specs, tok, completions, force_zero)
    disabled = tuple(c for c in COMPONENTS if not cfg.enabled(c) or c in force_zero)
    return MetricsRecord(
        step=step,
        variant=variant,
        disabled=disabled,
        gating=cfg.gating,
        val_loss=loss,
        val_perplexity=math.exp(loss),
        per_kind_perplexity=per_kind,
        per_kind_tokens=per_kind_tokens,
        trajectory_mse=mse,
        energy_error=energy,
        wall_seconds=time.perf_counter() - t0,
    )


def aggregate_perplexity(record: MetricsRecord) -> float:
    """Token-weighted recombination of the per-kind perplexities into an overall loss."""
    total = sum(record.per_kind_tokens.values())
    return sum(math.log(record.per_kind_perplexity[k]) * n for k, n in record.per_kind_tokens.items()) / total


# architecture fields that must agree between a run config and a checkpoint
_ARCH_FIELDS = ("vocab_size", "d", "layers", "heads", "C", "n_max", "d_ff", "d_spec", "ln_eps")


def check_compatible(expected: ModelConfig, found: ModelConfig) -> None:
    diffs = [f"{k}: config={getattr(expected, k)!r} checkpoint={getattr(found, k)!r}" for k in _ARCH_FIELDS if getattr(expected, k) != getattr(found, k)]
    if diffs:
        raise MismatchError("config/checkpoint mismatch: " + "; ".join(diffs))


def _runtime_config(ckpt_cfg: ModelConfig, disable: Iterable[str] = (), gating: str | None = None) -> ModelConfig:
    cfg = ckpt_cfg.with_disabled(disable)
    if gating is not None and gating != cfg.gating:
        if cfg.gating == "none":
            raise MismatchError("this checkpoint has no gate parameters; gating cannot be changed")
        cfg = dataclasses.replace(cfg, gating=gating)
    return cfg


def evaluate(
    checkpoint,
    dataset,
    run_cfg: RunConfig | None = None,
    disable: Iterable[str] = (),
    gating: str | None = None,
    completions: int | None = None,
) -> MetricsRecord:
    ckpt_cfg, params = load_checkpoint(checkpoint)
    if run_cfg is not None:
        check_compatible(run_cfg.model, ckpt_cfg)
    cfg = _runtime_config(ckpt_cfg, disable, gating)
    seq_len = cfg.n_max + 1
    tokens, specs = load_split(os.fspath(dataset), cfg, seq_len)
    data = run_cfg.data if run_cfg is not None else None
    tok = data.tokenizer(seq_len) if data else TokenizerSpec(seq_len=seq_len, bins=cfg.vocab_size - 2)
    if completions is None:
        completions = data.completions if data else 0
    variant = "full" if not list(disable) else "-" + "-".join(disable)
    rec = evaluate_arrays(params, cfg, tokens, specs, tok, completions, variant=variant)
    log.info("eval %s: loss %.6f ppl %.4f (%.1fs)", variant, rec.val_loss, rec.val_perplexity, rec.wall_seconds)
    return rec


# -- training ---------------------------------------------------------------------------


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_arrays(
    cfg: RunConfig,
    train_tokens: np.ndarray,
    val_tokens: np.ndarray,
    val_specs: list[SystemSpec],
    metrics_path: str | None = None,
    variant: str = "full",
) -> tuple[MetricsRecord, dict[str, np.ndarray]]:
    model, opt_cfg = cfg.model, cfg.optimizer
    params = init_params(model, make_rng(opt_cfg.seed))
    batch_rng = make_rng(opt_cfg.seed, 1)
    opt = AdamW(weight_decay=opt_cfg.weight_decay)
    val_tokens = val_tokens[: cfg.data.eval_sequences]
    val_specs = val_specs[: cfg.data.eval_sequences]
    tok = cfg.data.tokenizer(cfg.seq_len)
    fh = open(metrics_path, "w", newline="\n") if metrics_path else None
    record = None
    window: list[float] = []
    t0 = time.perf_counter()
    try:
        for step in range(opt_cfg.steps):
            idx = batch_rng.integers(len(train_tokens), size=opt_cfg.batch_size)
            tp = as_tensors(params, requires_grad=True)
            try:
                loss, _ = sequence_loss(tp, model, train_tokens[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
            loss.backward()
            grads = {k: t.grad for k, t in tp.items() if t.grad is not None}
            _clip(grads, opt_cfg.grad_clip)
            lr = warmup_cosine_lr(step, opt_cfg.learning_rate, opt_cfg.warmup_steps, opt_cfg.steps, opt_cfg.min_lr)
            opt.step(params, grads, lr)
            window.append(loss.item())
            last = step + 1 == opt_cfg.steps
            if (step + 1) % opt_cfg.eval_interval == 0 or last:
                record = evaluate_arrays(
                    params,
                    model,
                    val_tokens,
                    val_specs,
                    tok,
                    completions=cfg.data.completions if last else 0,
                    step=step + 1,
                    variant=variant,
                )
                record.train_loss = float(np.mean(window))
                record.wall_seconds = time.perf_counter() - t0
                window = []
                log.info(
                    "step %d train %.4f val %.4f ppl %.3f (%.1fs)",
                    step + 1,
                    record.train_loss,
                    record.val_loss,
                    record.val_perplexity,
                    record.wall_seconds,
                )
                if fh:
                    fh.write(record.to_json() + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return record, params


def train(cfg: RunConfig) -> tuple[MetricsRecord, dict[str, np.ndarray]]:
    train_tokens, _ = load_split(cfg.path(cfg.data.train_path), cfg.model, cfg.seq_len)
    val_tokens, val_specs = load_split(cfg.path(cfg.data.val_path), cfg.model, cfg.seq_len)
    metrics_path = cfg.path(cfg.output.metrics_path)
    ckpt_path = cfg.path(cfg.output.checkpoint_path)
    for p in (metrics_path, ckpt_path):
        os.makedirs(os.path.dirname(p) or ".", exist_ok=True)
    variant = "full" if all(cfg.model.enabled(c) for c in COMPONENTS) else "+".join(c for c in COMPONENTS if cfg.model.enabled(c))
    record, params = train_arrays(cfg, train_tokens, val_tokens, val_specs, metrics_path, variant)
    save_checkpoint(ckpt_path, cfg.model, params)
    return record, params


# -- ablation ------------------------------------------------------------------------------


def ablate(checkpoint, dataset, run_cfg: RunConfig | None = None, completions: int | None = None) -> list[MetricsRecord]:
    """Full model plus each single-component ablation (component output forced to zero)."""
    ckpt_cfg, _ = load_checkpoint(checkpoint)
    missing = [c for c in COMPONENTS if not ckpt_cfg.enabled(c)]
    if missing:
        raise MismatchError(f"ablation needs a checkpoint with every component enabled; missing {missing}")
    rows = [evaluate(checkpoint, dataset, run_cfg, completions=completions)]
    for c in COMPONENTS:
        rows.append(evaluate(checkpoint, dataset, run_cfg, disable=[c], completions=completions))
    return rows


def format_table(rows: list[MetricsRecord], reference: MetricsRecord | None = None) -> str:
    ref = reference or rows[0]
    head = "variant\tval_loss\tval_perplexity\tdelta_perplexity\tdelta_percent\ttrajectory_mse\tenergy_error"
    out = [head]
    for r in rows:
        delta = r.val_perplexity - ref.val_perplexity
        pct = 100.0 * delta / ref.val_perplexity
        out.append(
            "\t".join(
                [
                    r.variant,
                    repr(r.val_loss),
                    repr(r.val_perplexity),
                    repr(delta),
                    repr(pct),
                    repr(r.trajectory_mse),
                    repr(r.energy_error),
                ]
            )
        )
    return "\n".join(out) + "\n"


# -- causality audit --------------------------------------------------------------------------


@dataclass
class AuditReport:
    trials: int
    passes: dict = field(default_factory=dict)
    max_deviation: dict = field(default_factory=dict)
    failing_seeds: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passes[k] == self.trials for k in self.passes)

    def lines(self) -> list[str]:
        out = []
        for k in self.passes:
            status = "PASS" if self.passes[k] == self.trials else "FAIL"
            seeds = self.failing_seeds[k][:5]
            extra = f" failing seeds {seeds}" if seeds else ""
            out.append(f"{status} {k}: {self.passes[k]}/{self.trials} max_dev={self.max_deviation[k]:.3e}{extra}")
        return out


def _chunk_of(t: int, C: int) -> int:
    return t // C


def audit_causality(cfg: ModelConfig, trials: int = 100, seed: int = 0, n: int = 64) -> AuditReport:
    """Perturbation audits of the full stack and of the energy and periodicity paths."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = min(n, cfg.n_max)
    params = init_params(cfg, make_rng(seed), "random")
    report = AuditReport(trials)
    checks = ["model"]
    if cfg.enable_energy:
        checks.append("energy_delay")
    if cfg.enable_periodicity:
        checks.append("periodicity_delay")
    for k in checks:
        report.passes[k] = 0
        report.max_deviation[k] = 0.0
        report.failing_seeds[k] = []

    def note(key, dev, trial_seed):
        report.max_deviation[key] = max(report.max_deviation[key], dev)
        if dev <= AUDIT_TOLERANCE:
            report.passes[key] += 1
        else:
            report.failing_seeds[key].append(trial_seed)

    d = cfg.d
    pp = None
    if cfg.enable_periodicity:
        pp = PeriodicityParams(*(Tensor(params["blocks.0.period." + k]) for k in ("alpha_raw", "w1", "b1", "w2", "b2")))
    for trial in range(trials):
        trial_seed = seed * 1_000_003 + trial
        rng = make_rng(trial_seed)
        tokens = rng.integers(cfg.vocab_size, size=n)
        t = int(rng.integers(n))
        other = tokens.copy()
        other[t] = (other[t] + 1 + rng.integers(cfg.vocab_size - 1)) % cfg.vocab_size
        a = logits_np(tokens, params, cfg)
        b = logits_np(other, params, cfg)
        note("model", float(np.max(np.abs(a[:t] - b[:t]), initial=0.0)), trial_seed)

        H = rng.standard_normal((n, d))
        H2 = H.copy()
        H2[t] = rng.standard_normal(d)
        keep = np.ones(n, dtype=bool)
        keep[t] = False
        if cfg.enable_energy:
            intensity = float(rng.normal(0.0, 1.0))
            hi = min(n, (_chunk_of(t, cfg.C) + 2) * cfg.C)
            ea = energy_encode(H, intensity, cfg.C).data
            eb = energy_encode(H2, intensity, cfg.C).data
            rows = keep.copy()
            rows[hi:] = False
            note("energy_delay", float(np.max(np.abs(ea[rows] - eb[rows]), initial=0.0)), trial_seed)
        if pp is not None:
            hi = min(n, (_chunk_of(t, cfg.C) + 1) * cfg.C)
            pa = periodicity_encode(H, pp, cfg.C).data
            pb = periodicity_encode(H2, pp, cfg.C).data
            rows = keep.copy()
            rows[hi:] = False
            note("periodicity_delay", float(np.max(np.abs(pa[rows] - pb[rows]), initial=0.0)), trial_seed)
    return report


# -- gradient check -------------------------------------------------------------------------


_PART_STAGE = {"ln1": "mix", "attn": "gravitator", "energy": "energy", "period": "periodicity", "gate": "fuse", "ln2": "ffn", "ffn": "ffn"}


def _probe_stage(name: str, layers: int) -> tuple[int, str]:
    """Where a parameter first acts, as (block, stage); embeddings sit before block 0, ln_f after the last."""
    if name.startswith("blocks."):
        _, b, part = name.split(".", 2)
        return int(b), _PART_STAGE[part.split(".")[0]]
    if name.startswith("ln_f."):
        return layers, "mix"
    return -1, name


def check_gradients(cfg: ModelConfig, seed: int = 0, n: int | None = None, h: float = 1e-6) -> dict[str, tuple[float, tuple]]:
    """Worst relative error per parameter tensor for a randomly initialised model.

    Analytic gradients come from one backward pass through the whole model.
    Each finite-difference probe reruns the forward pass only from the point
    where the perturbed parameter first acts (a block's input, one of its
    components, its gate fusion or its feed-forward half), starting from
    cached activations that are bit-identical to those of a full pass.
    The default length, ``2 * C + 1``, is the shortest that reaches the
    delayed energy compensation.
    """
    n = min(2 * cfg.C + 1 if n is None else n, cfg.n_max)
    params = init_params(cfg, make_rng(seed), "random")
    tokens = make_rng(seed, 7).integers(cfg.vocab_size, size=n + 1)
    grads = analytic_gradients(lambda tp: sequence_loss(tp, cfg, tokens)[0], params)

    base = as_tensors(params)
    inputs, targets = tokens[:-1], tokens[1:]
    x = embed(inputs, base, cfg)
    embedded = x.data.tobytes()
    cache = {}
    for b in range(cfg.layers):
        H, outputs = block_components(x, base, b, cfg)
        cache[b] = (x, H, outputs)
        cache[b, "ffn"] = block_fuse(x, H, outputs, base, b, cfg)
        x = block_ffn(cache[b, "ffn"], base, b, cfg)
    cache[cfg.layers] = (x, None, None)
    base_loss = cross_entropy_loss(output_logits(x, base, cfg), targets)[0]

    def finish(x, p, start):
        for i in range(start, cfg.layers):
            x = block_forward(x, p, i, cfg)
        return cross_entropy_loss(output_logits(x, p, cfg), targets)[0]

    def resume(b, stage):
        def loss_fn(probe):
            p = {**base, **probe}
            if b < 0:
                x = embed(inputs, p, cfg)
                # pos_emb acts nowhere else: an unchanged embedding (rows past
                # the sequence) leaves every later value, and the loss, unchanged
                if stage == "pos_emb" and x.data.tobytes() == embedded:
                    return base_loss
                return finish(x, p, 0)
            if stage == "ffn":
                return finish(block_ffn(cache[b, "ffn"], p, b, cfg), p, b + 1)
            x, H, outputs = cache[b]
            if stage == "mix":
                return finish(x, p, b)
            if stage != "fuse":
                outputs = {**outputs, stage: component_output(stage, H, p, b, cfg)}
            return finish(block_ffn(block_fuse(x, H, outputs, p, b, cfg), p, b, cfg), p, b + 1)

        return loss_fn

    groups: dict[tuple[int, str], list[str]] = {}
    for name in params:
        groups.setdefault(_probe_stage(name, cfg.layers), []).append(name)
    report = {}
    for stage, names in groups.items():
        sub = {k: params[k] for k in names}
        report.update(grad_check_report(resume(*stage), sub, h, grads={k: grads[k] for k in names}))
    return {k: report[k] for k in params}

