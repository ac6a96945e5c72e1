"""scikit-learn style wrappers around the tokenizer and the language model.

>>> tok = TrajectoryTokenizer(seq_len=33).fit(states)        # (n_seq, steps, channels)
>>> X = tok.transform(states)
>>> lm = MPPALanguageModel(n_max=32, steps=200).fit(X)
>>> lm.perplexity(X)
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from mppa.config import DataConfig, OptimizerConfig, RunConfig
from mppa.harness import per_token_losses, train_arrays
from mppa.model import ModelConfig, check_tokens, greedy_decode, logits_np
from mppa.numerics._kernels import seq_sum
from mppa.numerics.tensor import log_softmax_np
from mppa.physics import TokenizerSpec, detokenize, tokenize


class TrajectoryTokenizer(TransformerMixin, BaseEstimator):
    """Quantise (n_seq, steps, channels) state arrays into token sequences and back."""

    def __init__(self, value_min=-4.0, value_max=4.0, bins=62, seq_len=129):
        self.value_min = value_min
        self.value_max = value_max
        self.bins = bins
        self.seq_len = seq_len

    def _spec(self) -> TokenizerSpec:
        return TokenizerSpec(value_min=self.value_min, value_max=self.value_max, bins=self.bins, seq_len=self.seq_len)

    def _states(self, X):
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.ndim != 3:
            raise ValueError(f"expected (n_seq, steps, channels) states, got shape {X.shape}")
        return X

    def fit(self, X, y=None):
        X = self._states(X)
        self.spec_ = self._spec()
        self.n_channels_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = self._states(X)
        if X.shape[2] != self.n_channels_:
            raise ValueError(f"fitted on {self.n_channels_} channels, got {X.shape[2]}")
        return np.stack([tokenize(seq, self.spec_) for seq in X])

    def inverse_transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=np.int64)
        return np.stack([detokenize(row, self.spec_, self.n_channels_) for row in X])


class MPPALanguageModel(BaseEstimator):
    """Next-token model over integer token matrices of shape (n_seq, length).

    ``fit`` trains from scratch with AdamW and a warmup-cosine schedule;
    ``history_`` keeps the last metrics record (computed on the training rows).
    """

    def __init__(
        self,
        vocab_size=64,
        d=32,
        layers=2,
        heads=4,
        C=8,
        n_max=128,
        enable_gravitator=True,
        enable_energy=True,
        enable_periodicity=True,
        gating="causal_prefix",
        learning_rate=3e-3,
        steps=500,
        batch_size=16,
        weight_decay=0.01,
        warmup_steps=50,
        min_lr=3e-4,
        grad_clip=1.0,
        random_state=0,
    ):
        self.vocab_size = vocab_size
        self.d = d
        self.layers = layers
        self.heads = heads
        self.C = C
        self.n_max = n_max
        self.enable_gravitator = enable_gravitator
        self.enable_energy = enable_energy
        self.enable_periodicity = enable_periodicity
        self.gating = gating
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.min_lr = min_lr
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            d=self.d,
            layers=self.layers,
            heads=self.heads,
            C=self.C,
            n_max=self.n_max,
            enable_gravitator=self.enable_gravitator,
            enable_energy=self.enable_energy,
            enable_periodicity=self.enable_periodicity,
            gating=self.gating,
        )

    def _tokens(self, X, min_len=1):
        # id range and length are validated again by the forward pass
        return check_array(X, dtype=np.int64, ensure_min_features=min_len)

    def fit(self, X, y=None):
        cfg = self._model_config()
        X = check_array(X, dtype=np.int64, ensure_min_features=2)
        check_tokens(X[:, :-1], cfg)
        check_tokens(X[:, -1:], cfg)
        if X.shape[1] - 1 > cfg.n_max:
            raise ValueError(f"sequences of length {X.shape[1]} exceed n_max + 1 = {cfg.n_max + 1}")
        run = RunConfig(
            model=cfg,
            optimizer=OptimizerConfig(
                learning_rate=self.learning_rate,
                steps=self.steps,
                batch_size=self.batch_size,
                weight_decay=self.weight_decay,
                warmup_steps=self.warmup_steps,
                min_lr=self.min_lr,
                seed=self.random_state,
                eval_interval=self.steps,
                grad_clip=self.grad_clip,
            ),
            data=DataConfig(eval_sequences=len(X), completions=0),
        )
        self.history_, self.params_ = train_arrays(run, X, X, [])
        self.config_ = cfg
        return self

    def predict(self, X):
        """Argmax next token at every position: column j predicts token j + 1."""
        check_is_fitted(self, "params_")
        X = self._tokens(X)
        return np.argmax(logits_np(X, self.params_, self.config_), axis=-1)

    def predict_log_proba(self, X):
        check_is_fitted(self, "params_")
        X = self._tokens(X)
        return log_softmax_np(logits_np(X, self.params_, self.config_))

    def mean_loss(self, X) -> float:
        check_is_fitted(self, "params_")
        X = self._tokens(X, min_len=2)
        per = per_token_losses(self.params_, self.config_, X)
        return float(seq_sum(per.reshape(-1)) / per.size)

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy (greater is better)."""
        return -self.mean_loss(X)

    def perplexity(self, X) -> float:
        return math.exp(self.mean_loss(X))

    def generate(self, prompt, steps: int):
        check_is_fitted(self, "params_")
        prompt = self._tokens(np.atleast_2d(prompt))
        if prompt.shape[1] + steps - 1 > self.config_.n_max:
            raise ValueError(f"prompt plus {steps} steps exceeds n_max={self.config_.n_max}")
        return greedy_decode(prompt, self.params_, self.config_, steps)
