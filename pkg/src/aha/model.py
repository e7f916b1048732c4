"""Decoder-only language model built from all-or-here attention blocks.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``layers.0.w_q``), which is also the checkpoint layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._rng import substream
from .attention import AHABlockWeights, AHAConfig, GateMatrix, aha_block
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
FORCE_BIAS = 1e4
FORCE_MODES = ("auto", "all-full", "all-local")
ROUTER_BIAS_INIT = 1.0
_BLOCK_KEYS = ("w_q", "w_k", "w_v", "w_o", "w_router", "router_bias")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    max_seq_len: int = 256
    window: int = 8
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for f in ("vocab_size", "model_dim", "num_layers", "num_heads", "mlp_ratio", "max_seq_len"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        self.aha  # validates d, m, w, tau

    @property
    def aha(self) -> AHAConfig:
        return AHAConfig(self.model_dim, self.num_heads, self.window, self.tau)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)


def param_count(cfg: ModelConfig) -> int:
    d, m, V, L = cfg.model_dim, cfg.num_heads, cfg.vocab_size, cfg.num_layers
    hidden = cfg.mlp_ratio * d
    per_layer = 4 * d * d + d * m + m + 2 * d + 2 * d * hidden
    return V * d + L * per_layer + d + d * V


def is_router_param(name: str) -> bool:
    return name.endswith(".w_router") or name.endswith(".router_bias")


def is_no_decay_param(name: str) -> bool:
    """Norm gains and biases are excluded from weight decay."""
    return name.endswith("_norm") or name == "final_norm" or name.endswith("bias")


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Deterministic initialization; router starts with every gate open."""
    rng = substream(cfg.seed if seed is None else seed, "init")
    d, m, V = cfg.model_dim, cfg.num_heads, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    std, out_std = 0.02, 0.02 / math.sqrt(2 * cfg.num_layers)

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    params = {"embed": normal((V, d), std)}
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        params[p + "attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "w_q"] = normal((d, d), std)
        params[p + "w_k"] = normal((d, d), std)
        params[p + "w_v"] = normal((d, d), std)
        params[p + "w_o"] = normal((d, d), out_std)
        params[p + "w_router"] = Tensor(np.zeros((d, m)), requires_grad=True)
        params[p + "router_bias"] = Tensor(np.full(m, ROUTER_BIAS_INIT), requires_grad=True)
        params[p + "mlp_norm"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "w_in"] = normal((d, hidden), std)
        params[p + "w_out"] = normal((hidden, d), out_std)
    params["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    params["lm_head"] = normal((d, V), std)
    return params


def block_weights(params: dict[str, Tensor], layer: int) -> AHABlockWeights:
    return AHABlockWeights(**{k: params[f"layers.{layer}.{k}"] for k in _BLOCK_KEYS})


def sinusoidal_positions(n: int, d: int, amplitude: float = 0.1) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return amplitude * table


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokens,
    force_gates: str = "auto",
) -> tuple[Tensor, list[GateMatrix]]:
    """Logits for every position plus one GateMatrix per layer.

    ``tokens`` is ``(n,)`` or ``(batch, n)``.  ``force_gates`` overrides the
    router bias in every layer: ``all-full`` opens all gates, ``all-local``
    shuts them.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    n = tokens.shape[-1]
    if n < 1 or n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} outside 1..{cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    if force_gates not in FORCE_MODES:
        raise ValueError(f"force_gates must be one of {FORCE_MODES}, got {force_gates!r}")
    override = {"auto": None, "all-full": FORCE_BIAS, "all-local": -FORCE_BIAS}[force_gates]

    acfg = cfg.aha
    x = ad.embedding(params["embed"], tokens) + sinusoidal_positions(n, cfg.model_dim)
    traces = []
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h, gates = aha_block(ad.rmsnorm(x, params[p + "attn_norm"]), block_weights(params, layer), acfg, override)
        x = x + h
        hidden = ad.gelu(ad.rmsnorm(x, params[p + "mlp_norm"]) @ params[p + "w_in"])
        x = x + hidden @ params[p + "w_out"]
        traces.append(gates)
    logits = ad.rmsnorm(x, params["final_norm"]) @ params["lm_head"]
    return logits, traces


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding a JSON header and every parameter by name."""
    meta = {"version": CHECKPOINT_VERSION, "format": "aha-checkpoint", "model": cfg.to_dict(),
            "params": sorted(params), "extra": extra or {}}
    arrays = {f"param/{k}": np.asarray(v.data) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not an aha checkpoint (missing header)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = ModelConfig.from_dict(meta["model"])
        params = {}
        for name in meta["params"]:
            arr = data[f"param/{name}"]
            params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return params, cfg, meta
