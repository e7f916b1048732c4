"""scikit-learn style wrapper around the functional model and training loop."""
from __future__ import annotations

import collections.abc
from typing import Iterator

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rng import substream
from .analysis import GateTrace, UsageReport, traces_from_gates, usage_report
from .model import FORCE_MODES, ModelConfig, init_params
from .tasks import TaskSample, stack
from .training import TrainConfig, evaluate, train


def check_samples(X, vocab_size: int | None = None) -> list[TaskSample]:
    """Coerce ``X`` into a list of equal-length samples.

    Accepts a sequence of :class:`TaskSample`, a ``(tokens, loss_mask)``
    pair of 2-D arrays, or a bare 2-D integer token array (every position
    but the last is scored).
    """
    if isinstance(X, TaskSample):
        samples = [X]
    elif isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], TaskSample):
        tokens, mask = (np.asarray(a) for a in X)
        samples = [TaskSample(t, m) for t, m in zip(np.atleast_2d(tokens), np.atleast_2d(mask))]
    elif isinstance(X, np.ndarray):
        tokens = np.atleast_2d(X)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError(f"token arrays must be integer, got {tokens.dtype}")
        mask = np.ones(tokens.shape, dtype=bool)
        mask[:, -1] = False
        samples = [TaskSample(t, m) for t, m in zip(tokens, mask)]
    else:
        samples = list(X)
        if not all(isinstance(s, TaskSample) for s in samples):
            raise TypeError("expected TaskSample objects, a (tokens, loss_mask) pair, or a token array")
    if not samples:
        raise ValueError("no samples given")
    if len({len(s) for s in samples}) != 1:
        raise ValueError("all samples must have the same length")
    if vocab_size is not None and max(int(s.tokens.max()) for s in samples) >= vocab_size:
        raise ValueError(f"token id >= vocab_size {vocab_size}")
    return samples


def _cycle(samples: list[TaskSample], seed: int) -> Iterator[TaskSample]:
    rng = substream(seed, "order")
    while True:
        for i in rng.permutation(len(samples)):
            yield samples[i]


class AHALanguageModel(BaseEstimator):
    """Decoder-only LM whose heads route each token to full or windowed attention.

    ``fit`` trains on task samples (a finite list is cycled, an iterator is
    consumed); ``predict`` returns argmax next tokens; ``score`` is the
    accuracy over scored positions; ``transform`` returns per-token
    full-attention usage.
    """

    def __init__(self, vocab_size=64, model_dim=64, num_layers=2, num_heads=4, mlp_ratio=4,
                 max_seq_len=256, window=8, tau=0.5, lam=3e-4, lr=3e-4, beta1=0.9, beta2=0.95,
                 weight_decay=0.01, warmup_ratio=0.03, steps=300, pretrain_steps=0, batch_size=16,
                 clip_norm=1.0, freeze_base=False, force_gates="auto", random_state=0):
        self.vocab_size = vocab_size
        self.model_dim = model_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.max_seq_len = max_seq_len
        self.window = window
        self.tau = tau
        self.lam = lam
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.steps = steps
        self.pretrain_steps = pretrain_steps
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.freeze_base = freeze_base
        self.force_gates = force_gates
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        if self.force_gates not in FORCE_MODES:
            raise ValueError(f"force_gates must be one of {FORCE_MODES}")
        mcfg = ModelConfig(self.vocab_size, self.model_dim, self.num_layers, self.num_heads, self.mlp_ratio,
                           self.max_seq_len, self.window, self.tau, self.random_state)
        tcfg = TrainConfig(lam=self.lam, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           weight_decay=self.weight_decay, warmup_ratio=self.warmup_ratio, steps=self.steps,
                           pretrain_steps=self.pretrain_steps, batch_size=self.batch_size,
                           seed=self.random_state, freeze_base=self.freeze_base, clip_norm=self.clip_norm)
        return mcfg, tcfg

    def fit(self, X, y=None, init=None):
        mcfg, tcfg = self._configs()
        if isinstance(X, collections.abc.Iterator):
            stream = X
        else:
            stream = _cycle(check_samples(X, mcfg.vocab_size), self.random_state)
        params = init if init is not None else init_params(mcfg)
        self.params_, self.history_ = train(params, mcfg, stream, tcfg, force_gates=self.force_gates)
        self.config_ = mcfg
        return self

    def _evaluate(self, X, force_gates=None):
        check_is_fitted(self, "params_")
        samples = check_samples(X, self.config_.vocab_size)
        return samples, evaluate(self.params_, self.config_, samples, force_gates or self.force_gates)

    def predict(self, X) -> np.ndarray:
        return self._evaluate(X)[1].predictions

    def score(self, X, y=None) -> float:
        return self._evaluate(X)[1].accuracy

    def transform(self, X) -> np.ndarray:
        """Per-token full-attention usage ``(batch, n)`` averaged over layers and heads."""
        _, res = self._evaluate(X)
        return np.stack(res.gates).mean(axis=(0, 3))

    def gate_traces(self, X, force_gates=None) -> list[GateTrace]:
        samples, res = self._evaluate(X, force_gates)
        tokens, mask = stack(samples)
        tasks = [s.meta.get("task", "") for s in samples]
        return traces_from_gates(res.gates, tasks, tokens, mask)

    def usage_report(self, X, force_gates=None) -> UsageReport:
        return usage_report(self.gate_traces(X, force_gates))

    @property
    def mu_f_(self) -> float:
        check_is_fitted(self, "history_")
        return self.history_[-1].mu_f
