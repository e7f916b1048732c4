"""Synthetic tasks that separate local from long-range context dependence.

All tasks share one 64-symbol vocabulary.  Every sample starts with ``BOS``
and ``loss_mask[i]`` is True when the prediction of ``tokens[i + 1]`` made
at position ``i`` is scored.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator

import numpy as np

from ._rng import substream

VOCAB_SIZE = 64
DIGITS = tuple(range(10))
SEP = 10
KV_MARK = 11
QUERY = 12
BOS = 13
KEYS = tuple(range(16, 32))
VALUES = tuple(range(32, 48))
FILLER = tuple(range(48, 64))
TASKS = ("counting", "needle", "local_lm")


def symbol(token: int) -> str:
    """Human-readable name of a token id."""
    if token in DIGITS:
        return str(token)
    named = {SEP: ",", KV_MARK: "<kv>", QUERY: "<q>", BOS: "<bos>"}
    if token in named:
        return named[token]
    if token in KEYS:
        return f"k{token - KEYS[0]}"
    if token in VALUES:
        return f"v{token - VALUES[0]}"
    if token in FILLER:
        return f"f{token - FILLER[0]}"
    return f"<{token}>"


@dataclass
class TaskSample:
    tokens: np.ndarray
    loss_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.tokens.ndim != 1 or self.tokens.shape != self.loss_mask.shape:
            raise ValueError("tokens and loss_mask must be 1-D with equal length")
        if not self.loss_mask.any():
            raise ValueError("a sample needs at least one scored position")
        if self.tokens.min() < 0 or self.tokens.max() >= VOCAB_SIZE:
            raise ValueError(f"token ids must lie in [0, {VOCAB_SIZE})")

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {"tokens": self.tokens.tolist(), "loss_mask": self.loss_mask.astype(int).tolist(),
                "meta": self.meta}

    @classmethod
    def from_json(cls, record: dict) -> "TaskSample":
        return cls(record["tokens"], record["loss_mask"], record.get("meta", {}))


def gen_counting(seed: int, length: int, start: int | None = None, prompt_fraction: float = 0.25) -> TaskSample:
    """Ascending integers ``start, start+1, ...`` spelled digit by digit with separators."""
    if length < 8:
        raise ValueError(f"counting needs length >= 8, got {length}")
    rng = substream(seed, "counting")
    if start is None:
        start = int(rng.integers(0, 900))
    tokens = [BOS]
    for number in itertools.count(start):
        tokens.extend(int(c) for c in str(number))
        tokens.append(SEP)
        if len(tokens) >= length:
            break
    tokens = np.array(tokens[:length])
    mask = np.zeros(length, dtype=bool)
    mask[max(1, int(prompt_fraction * length)) - 1:length - 1] = True
    return TaskSample(tokens, mask, {"task": "counting", "start": int(start)})


def gen_needle(seed: int, length: int, key_distance: int) -> TaskSample:
    """Plant ``<kv> key value`` early, ask ``<q> key`` at the end.

    ``key_distance`` is how far the answer position (the queried key) sits
    after the planted value; only that one prediction is scored.
    """
    if not 2 <= key_distance <= length - 5:
        raise ValueError(f"key_distance must lie in [2, {length - 5}] for length {length}, got {key_distance}")
    rng = substream(seed, "needle")
    key = int(rng.choice(KEYS))
    value = int(rng.choice(VALUES))
    tokens = rng.choice(FILLER, size=length)
    tokens[0] = BOS
    answer = length - 2
    value_pos = answer - key_distance
    tokens[value_pos - 2:value_pos + 1] = (KV_MARK, key, value)
    tokens[length - 3:] = (QUERY, key, value)
    mask = np.zeros(length, dtype=bool)
    mask[answer] = True
    return TaskSample(tokens, mask, {"task": "needle", "key_distance": int(key_distance),
                                     "answer_pos": int(answer), "value": value, "key": key})


@lru_cache(maxsize=64)
def local_lm_table(order: int, table_seed: int = 0, num_symbols: int = len(FILLER),
                   concentration: float = 0.1) -> np.ndarray:
    """Row-stochastic ``(num_symbols, num_symbols)`` table of the lag-``order`` process."""
    if order < 1:
        raise ValueError("order must be >= 1")
    rng = substream(table_seed, f"local_lm_table/{order}/{num_symbols}")
    table = rng.dirichlet(np.full(num_symbols, concentration), size=num_symbols)
    table.setflags(write=False)
    return table


def _stationary(table: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(table.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return pi / pi.sum()


def gen_local_lm(seed: int, length: int, order: int, table_seed: int = 0,
                 alphabet: tuple[int, ...] = FILLER) -> TaskSample:
    """Order-``order`` Markov process where symbol ``i`` depends only on symbol ``i - order``.

    The first ``order`` symbols come from the stationary distribution; after
    that ``x[i] ~ table[x[i - order]]``.  With ``order=1`` this is a plain
    bigram chain.
    """
    if length < order + 2:
        raise ValueError(f"length {length} too short for order {order}")
    table = local_lm_table(order, table_seed, len(alphabet))
    rng = substream(seed, "local_lm")
    cum = np.cumsum(table, axis=1)
    symbols = list(rng.choice(len(alphabet), size=order, p=_stationary(table)))
    for u in rng.random(length - 1 - order):
        row = cum[symbols[-order]]
        symbols.append(min(int(np.searchsorted(row, u * row[-1], side="right")), len(alphabet) - 1))
    tokens = np.array([BOS] + [alphabet[s] for s in symbols])
    mask = np.zeros(length, dtype=bool)
    mask[order:length - 1] = True
    return TaskSample(tokens, mask, {"task": "local_lm", "order": int(order), "table_seed": int(table_seed)})


def local_lm_entropy_rate(order: int, table_seed: int = 0, num_symbols: int = len(FILLER)) -> float:
    """Entropy rate in nats: ``sum_a pi(a) H(table[a])`` with ``pi`` stationary."""
    table = local_lm_table(order, table_seed, num_symbols)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(table > 0, table * np.log(table), 0.0).sum(axis=1)
    return float(_stationary(table) @ h)


def order_alphabets(orders: tuple[int, ...]) -> dict[int, tuple[int, ...]]:
    """Disjoint filler slices, one per order, so a symbol identifies its process."""
    size = len(FILLER) // len(orders)
    if size < 2:
        raise ValueError(f"too many local orders ({len(orders)}) for {len(FILLER)} filler symbols")
    return {k: FILLER[i * size:(i + 1) * size] for i, k in enumerate(orders)}


@dataclass(frozen=True)
class MixConfig:
    """Parameters of the heterogeneous training stream."""

    weights: tuple[float, float, float] = (0.2, 0.3, 0.5)
    length: int = 64
    needle_distance: tuple[int, int] = (2, 59)
    local_orders: tuple[int, ...] = (4, 8, 16)
    table_seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(TASKS),) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be {len(TASKS)} non-negative numbers summing to 1, got {self.weights}")
        lo, hi = self.needle_distance
        if not 2 <= lo <= hi <= self.length - 5:
            raise ValueError(f"needle_distance {self.needle_distance} invalid for length {self.length}")
        if not self.local_orders or max(self.local_orders) > self.length - 3:
            raise ValueError(f"local_orders {self.local_orders} invalid for length {self.length}")
        order_alphabets(tuple(self.local_orders))


def mixed_stream(seed: int, mix: MixConfig | None = None) -> Iterator[TaskSample]:
    """Endless, reproducible interleaving of the three tasks."""
    mix = mix or MixConfig()
    order_rng = substream(seed, "order")
    data_rng = substream(seed, "data")
    weights = np.asarray(mix.weights, dtype=float)
    alphabets = order_alphabets(tuple(mix.local_orders))
    for sample_id in itertools.count():
        task = TASKS[int(order_rng.choice(len(TASKS), p=weights))]
        sample_seed = int(data_rng.integers(0, 2**31 - 1))
        if task == "counting":
            sample = gen_counting(sample_seed, mix.length)
        elif task == "needle":
            lo, hi = mix.needle_distance
            sample = gen_needle(sample_seed, mix.length, int(data_rng.integers(lo, hi + 1)))
        else:
            order = int(mix.local_orders[int(data_rng.integers(len(mix.local_orders)))])
            sample = gen_local_lm(sample_seed, mix.length, order, mix.table_seed, alphabets[order])
        sample.meta["sample_id"] = sample_id
        yield sample


def task_samples(task: str, seed: int, count: int, mix: MixConfig | None = None,
                 key_distance: int | None = None) -> list[TaskSample]:
    """``count`` samples of one task (or ``"mixed"``) drawn with the mix's settings."""
    mix = mix or MixConfig()
    if task == "mixed":
        return list(itertools.islice(mixed_stream(seed, mix), count))
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS + ('mixed',)}")
    rng = substream(seed, f"task_samples/{task}")
    alphabets = order_alphabets(tuple(mix.local_orders))
    out = []
    for sample_id in range(count):
        sample_seed = int(rng.integers(0, 2**31 - 1))
        if task == "counting":
            sample = gen_counting(sample_seed, mix.length)
        elif task == "needle":
            kd = key_distance if key_distance is not None else int(rng.integers(mix.needle_distance[0],
                                                                                 mix.needle_distance[1] + 1))
            sample = gen_needle(sample_seed, mix.length, kd)
        else:
            order = int(mix.local_orders[int(rng.integers(len(mix.local_orders)))])
            sample = gen_local_lm(sample_seed, mix.length, order, mix.table_seed, alphabets[order])
        sample.meta["sample_id"] = sample_id
        out.append(sample)
    return out


def write_jsonl(samples: Iterable[TaskSample], path) -> int:
    count = 0
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path) -> list[TaskSample]:
    with open(path) as fh:
        return [TaskSample.from_json(json.loads(line)) for line in fh if line.strip()]


def stack(samples: list[TaskSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch equal-length samples into ``(tokens, loss_mask)`` arrays."""
    lengths = {len(s) for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"cannot batch samples of different lengths {sorted(lengths)}")
    return np.stack([s.tokens for s in samples]), np.stack([s.loss_mask for s in samples])
