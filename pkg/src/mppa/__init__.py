"""Physics-structured sequence model: causal attention plus chunked energy and periodicity encoders."""

from mppa.checkpoint import load_checkpoint, save_checkpoint
from mppa.config import RunConfig, load_run_config, parse_run_config
from mppa.energy import energy_encode
from mppa.gravitator import AttentionParams, build_causal_mask, causal_attention
from mppa.model import ConfigError, ModelConfig, init_params, model_forward, sequence_loss
from mppa.numerics import fft_forward, grad_check, make_rng
from mppa.periodicity import PeriodicityParams, periodicity_encode
from mppa.physics import SystemSpec, TokenizerSpec, detokenize, energy_conservation_error, simulate, tokenize

__version__ = "0.1.0"

__all__ = [
    "AttentionParams",
    "ConfigError",
    "ModelConfig",
    "PeriodicityParams",
    "RunConfig",
    "SystemSpec",
    "TokenizerSpec",
    "build_causal_mask",
    "causal_attention",
    "detokenize",
    "energy_conservation_error",
    "energy_encode",
    "fft_forward",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "load_run_config",
    "make_rng",
    "model_forward",
    "parse_run_config",
    "periodicity_encode",
    "save_checkpoint",
    "sequence_loss",
    "simulate",
    "tokenize",
]
