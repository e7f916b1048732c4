"""Experiment configuration: strict JSON with line-precise error messages."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .tasks import MixConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending line when known."""


def _key_lines(text: str) -> dict[tuple, int]:
    """Map each key path in a JSON document to the line its key appears on."""
    out: dict[tuple, int] = {}
    stack: list = []  # per container: [kind, current key or index]
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == '"':
            value, end = json.decoder.scanstring(text, i + 1)
            rest = text[end:].lstrip()
            if stack and stack[-1][0] == "obj" and rest.startswith(":"):
                stack[-1][1] = value
                path = tuple(f[1] for f in stack)
                out[path] = text.count("\n", 0, i) + 1
            i = end
            continue
        if c in "{[":
            if stack and stack[-1][0] == "arr":
                stack[-1][1] += 1
            stack.append(["obj", None] if c == "{" else ["arr", -1])
        elif c in "}]":
            if stack:
                stack.pop()
        i += 1
    return out


def _no_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _coerce(cls, data: dict, section: str, where, hidden=()):
    known = {f.name for f in fields(cls)} - set(hidden)
    for key, value in data.items():
        if key not in known and key not in hidden:
            raise ConfigError(f"{where((section, key))}unknown key '{section}.{key}' "
                              f"(allowed: {', '.join(sorted(known))})")
        if isinstance(value, list):
            data[key] = tuple(value)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where((section,))}invalid '{section}': {exc}") from None


@dataclass(frozen=True)
class EvalConfig:
    samples: int = 256
    seed: int = 1_000_000
    traces: int = 32

    def __post_init__(self):
        if self.samples < 1 or self.traces < 0:
            raise ValueError("eval.samples must be >= 1 and eval.traces >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs.  ``window`` and ``lam`` live at top level so
    sweeps can override them; ``model`` and ``train`` must not repeat them."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    window: int = 8
    lam: float = 3e-4
    seeds: tuple[int, ...] = (0,)
    out: str | None = None

    def __post_init__(self):
        # sections are validated on their own; this catches bad top-level overrides
        self.model_config(0)
        self.train_config(0)

    def model_config(self, seed: int) -> ModelConfig:
        return dataclasses.replace(self.model, window=self.window, seed=seed)

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, lam=self.lam, seed=seed)

    def with_point(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        for k in ("window", "seed"):
            model.pop(k)
        train = self.train.to_dict()
        for k in ("lam", "seed"):
            train.pop(k)
        return {
            "version": CONFIG_VERSION,
            "model": model,
            "train": train,
            "mix": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.mix).items()},
            "eval": dataclasses.asdict(self.eval),
            "window": self.window,
            "lam": self.lam,
            "seeds": list(self.seeds),
            "out": self.out,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_TOP_KEYS = {"version", "model", "train", "mix", "eval", "window", "lam", "seeds", "out"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a JSON experiment config; raise :class:`ConfigError`."""
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _key_lines(text)

    def where(path: tuple) -> str:
        line = lines.get(path)
        return f"{source}:{line}: " if line else f"{source}: "

    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{where((key,))}unknown key '{key}' (allowed: {', '.join(sorted(_TOP_KEYS))})")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"{where(('version',))}unsupported config version {raw['version']!r}")

    lam = raw.get("lam", 3e-4)
    if isinstance(lam, list):
        raise ConfigError(f"{where(('lam',))}'lam' must be a single number; "
                          f"to run several values use `aha sweep --axis lam=...`")
    window = raw.get("window", 8)
    if isinstance(window, list):
        raise ConfigError(f"{where(('window',))}'window' must be a single integer; "
                          f"to run several values use `aha sweep --axis w=...`")
    if not isinstance(lam, (int, float)) or isinstance(lam, bool) or lam < 0:
        raise ConfigError(f"{where(('lam',))}'lam' must be a non-negative number, got {lam!r}")
    if not isinstance(window, int) or isinstance(window, bool) or window < 1:
        raise ConfigError(f"{where(('window',))}'window' must be a positive integer, got {window!r}")

    for section in ("model", "train", "mix", "eval"):
        if not isinstance(raw.get(section, {}), dict):
            raise ConfigError(f"{where((section,))}'{section}' must be an object")
    for section, moved in (("model", ("window", "seed")), ("train", ("lam", "seed"))):
        for key in moved:
            if key in raw.get(section, {}):
                raise ConfigError(f"{where((section, key))}'{section}.{key}' is not allowed; "
                                  f"set '{'seeds' if key == 'seed' else key}' at top level")

    seeds = raw.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError(f"{where(('seeds',))}'seeds' must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"{where(('seeds',))}'seeds' contains duplicates")
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"{where(('out',))}'out' must be a string path")

    model = _coerce(ModelConfig, {**raw.get("model", {}), "window": window}, "model", where, ("window", "seed"))
    train = _coerce(TrainConfig, {**raw.get("train", {}), "lam": lam}, "train", where, ("lam", "seed"))
    mix = _coerce(MixConfig, dict(raw.get("mix", {})), "mix", where)
    ev = _coerce(EvalConfig, dict(raw.get("eval", {})), "eval", where)
    if mix.length > model.max_seq_len:
        raise ConfigError(f"{where(('mix', 'length'))}mix.length {mix.length} exceeds "
                          f"model.max_seq_len {model.max_seq_len}")
    return ExperimentConfig(model, train, mix, ev, window, float(lam), tuple(seeds), out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
