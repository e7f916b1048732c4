"""Joint LM + router-sparsity objective, AdamW, warmup schedule, training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, forward, is_no_decay_param, is_router_param
from .tasks import TaskSample, stack

logger = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "lm_loss", "reg_loss", "total_loss", "mu_f", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 3e-4
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    steps: int = 300
    pretrain_steps: int = 0
    batch_size: int = 16
    seed: int = 0
    freeze_base: bool = False
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class StepRecord:
    step: int
    lm_loss: float
    reg_loss: float
    total_loss: float
    mu_f: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, c))) for c in STEP_COLUMNS[1:]]


class TrainingAborted(RuntimeError):
    """Non-finite loss or activations; ``records`` holds the run up to the failure."""

    def __init__(self, message: str, step: int, records: list[StepRecord]):
        super().__init__(message)
        self.step = step
        self.records = records


def reg_loss(scores: list[Tensor]) -> Tensor:
    """Mean router score over every layer, token, and head."""
    if not scores:
        raise ValueError("reg_loss needs at least one layer of scores")
    total = sum(s.data.size for s in scores)
    acc = ad.tsum(scores[0])
    for s in scores[1:]:
        acc = acc + ad.tsum(s)
    return ad.scale(acc, 1.0 / total)


def total_loss(lm: Tensor, reg: Tensor, lam: float) -> Tensor:
    return lm + ad.scale(reg, lam)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup over ``ceil(warmup_ratio * total_steps)`` steps, then constant."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    warmup = math.ceil(round(warmup_ratio * total_steps, 9))
    if warmup == 0 or step >= warmup:
        return base_lr
    return base_lr * step / warmup


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, t: int,
               lr: float, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0,
               no_decay: Iterable[str] = ()) -> None:
    """One AdamW update applied in place to ``params`` (decoupled weight decay)."""
    if t < 1:
        raise ValueError("AdamW step counter starts at 1")
    b1, b2 = betas
    no_decay = set(no_decay)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if weight_decay and name not in no_decay:
            p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t


def _batches(stream: Iterator[TaskSample], batch_size: int) -> Iterator[list[TaskSample]]:
    while True:
        batch = [next(stream) for _ in range(batch_size)]
        yield batch


def next_token_targets(tokens: np.ndarray) -> np.ndarray:
    targets = np.zeros_like(tokens)
    targets[..., :-1] = tokens[..., 1:]
    return targets


def loss_and_traces(params, cfg: ModelConfig, tokens, loss_mask, lam: float, force_gates: str = "auto"):
    logits, traces = forward(params, cfg, tokens, force_gates)
    mask = np.asarray(loss_mask, dtype=bool).copy()
    mask[..., -1] = False
    lm = ad.cross_entropy_logits(logits, next_token_targets(np.asarray(tokens)), mask)
    reg = reg_loss([t.score_tensor for t in traces])
    return total_loss(lm, reg, lam), lm, reg, traces


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor


def _run_phase(params, cfg, batches, names, tcfg: TrainConfig, steps: int, lam: float, force_gates: str,
               offset: int, records: list[StepRecord], log_every: int) -> None:
    no_decay = [k for k in names if is_no_decay_param(k)]
    state = AdamState()
    for step in range(1, steps + 1):
        tokens, mask = stack(next(batches))
        lr = lr_at(step, steps, tcfg.lr, tcfg.warmup_ratio)
        for k in names:
            params[k].zero_grad()
        try:
            loss, lm, reg, traces = loss_and_traces(params, cfg, tokens, mask, lam, force_gates)
            ad.backward(loss)
        except ad.NonFiniteError as exc:
            raise TrainingAborted(f"step {offset + step}: {exc}", offset + step, records) from exc
        mu = float(np.mean([t.values.mean() for t in traces]))
        records.append(StepRecord(offset + step, lm.item(), reg.item(), loss.item(), mu, lr))
        grads = {k: params[k].grad for k in names if params[k].grad is not None}
        if tcfg.clip_norm is not None:
            _clip(grads, tcfg.clip_norm)
        adamw_step({k: params[k].data for k in grads}, grads, state, step, lr,
                   (tcfg.beta1, tcfg.beta2), tcfg.eps, tcfg.weight_decay, no_decay)
        if not all(np.isfinite(params[k].data).all() for k in grads):
            raise TrainingAborted(f"step {offset + step}: parameters became non-finite", offset + step, records)
        if log_every and step % log_every == 0:
            r = records[-1]
            logger.info("step %d lm %.4f reg %.4f mu_f %.3f lr %.2e", r.step, r.lm_loss, r.reg_loss, r.mu_f, lr)


def _pretrain_names(params) -> list[str]:
    return [k for k in params if not is_router_param(k)]


def pretrain(params: dict[str, Tensor], cfg: ModelConfig, stream: Iterable[TaskSample], tcfg: TrainConfig,
             log_every: int = 0) -> list[StepRecord]:
    """Full-attention warm start: every gate forced open, no sparsity term, router frozen.

    Consumes ``tcfg.pretrain_steps * tcfg.batch_size`` samples.  The result
    does not depend on ``cfg.window`` or ``tcfg.lam``, so one pretrained base
    can seed a whole sweep.
    """
    records: list[StepRecord] = []
    if tcfg.pretrain_steps:
        _run_phase(params, cfg, _batches(iter(stream), tcfg.batch_size), _pretrain_names(params), tcfg,
                   tcfg.pretrain_steps, 0.0, "all-full", 0, records, log_every)
    return records


def train(params: dict[str, Tensor], cfg: ModelConfig, stream: Iterable[TaskSample], tcfg: TrainConfig,
          force_gates: str = "auto", log_every: int = 0,
          pretrained: list[StepRecord] | None = None) -> tuple[dict[str, Tensor], list[StepRecord]]:
    """Run AdamW on batches drawn from ``stream``; params update in place.

    With ``pretrain_steps > 0`` the model first runs :func:`pretrain`, then
    the routed phase runs ``steps`` more steps with a fresh optimizer state
    and its own warmup.  Both phases share one running step counter.

    Pass ``pretrained`` (the records returned by :func:`pretrain`) when
    ``params`` already hold the pretrained base and ``stream`` is already
    advanced past it; the result is then identical to a cold call.
    """
    stream = iter(stream)
    if pretrained is None:
        records = pretrain(params, cfg, stream, tcfg, log_every)
    else:
        if len(pretrained) != tcfg.pretrain_steps:
            raise ValueError(f"got {len(pretrained)} pretraining records, expected {tcfg.pretrain_steps}")
        records = list(pretrained)
    names = [k for k in params if not tcfg.freeze_base or is_router_param(k)]
    _run_phase(params, cfg, _batches(stream, tcfg.batch_size), names, tcfg, tcfg.steps, tcfg.lam, force_gates,
               tcfg.pretrain_steps, records, log_every)
    return params, records


def write_step_records(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_COLUMNS)
        for r in records:
            writer.writerow(r.row())


def read_step_records(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepRecord(int(r["step"]), *(float(r[c]) for c in STEP_COLUMNS[1:])) for r in rows]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    num_scored: int
    mu_f: float
    gates: list[np.ndarray]  # per layer (batch, n, m)
    predictions: np.ndarray


def evaluate(params, cfg: ModelConfig, samples: list[TaskSample], force_gates: str = "auto",
             batch_size: int = 64) -> EvalResult:
    """Next-token loss and argmax accuracy over scored positions, plus gate traces."""
    losses, correct, scored = 0.0, 0, 0
    gates: list[list[np.ndarray]] = [[] for _ in range(cfg.num_layers)]
    preds = []
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            tokens, mask = stack(samples[start:start + batch_size])
            mask = mask.copy()
            mask[:, -1] = False
            logits, traces = forward(params, cfg, tokens, force_gates)
            targets = next_token_targets(tokens)
            lm = ad.cross_entropy_logits(logits, targets, mask)
            count = int(mask.sum())
            losses += lm.item() * count
            pred = logits.data.argmax(-1)
            correct += int(((pred == targets) & mask).sum())
            scored += count
            preds.append(pred)
            for layer, t in enumerate(traces):
                gates[layer].append(t.values)
    stacked = [np.concatenate(g, axis=0) for g in gates]
    mu = float(np.mean([g.mean() for g in stacked]))
    return EvalResult(losses / scored, correct / scored, scored, mu, stacked, np.concatenate(preds, axis=0))
