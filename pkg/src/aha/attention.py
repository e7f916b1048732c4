"""Full, sliding-window, and per-head routed (all-or-here) causal attention.

Tensors use the layout ``(..., n, heads, head_dim)`` at the public boundary;
leading axes are batch axes.  Positions are 0-indexed here, so token ``i``
attends to ``0..i`` under full attention and to ``max(0, i-w+1)..i`` under
a window of ``w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class AHAConfig:
    model_dim: int
    num_heads: int
    window: int
    tau: float = 0.5

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AHABlockWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_router: Tensor
    router_bias: Tensor

    def validate(self, cfg: AHAConfig) -> None:
        d, m = cfg.model_dim, cfg.num_heads
        expected = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_router": (d, m), "router_bias": (m,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t.data).all():
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class GateMatrix:
    """Binary gates and the router scores they were thresholded from.

    ``values`` and ``scores`` are ``(..., n, m)`` arrays;  ``score_tensor``
    keeps the differentiable scores for the sparsity penalty.
    """

    values: np.ndarray
    scores: np.ndarray
    score_tensor: Tensor | None = None

    @property
    def usage(self) -> float:
        return float(self.values.mean())


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def window_mask(n: int, window: int) -> np.ndarray:
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j <= i) & (j > i - window)


def router_scores(x: Tensor, w_router: Tensor, router_bias: Tensor) -> Tensor:
    """Per token-head importance scores ``sigmoid(x @ W + b)`` in (0, 1)."""
    if x.shape[-1] != w_router.shape[0] or router_bias.shape != (w_router.shape[1],):
        raise ValueError(
            f"router shapes disagree: x {x.shape}, W {w_router.shape}, bias {router_bias.shape}")
    return ad.sigmoid(ad.matmul(x, w_router) + router_bias)


def _to_heads(t: Tensor) -> Tensor:
    # (..., n, m, hd) -> (..., m, n, hd)
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.transpose(t, axes)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    scores = ad.scale(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax_row(scores, mask), v)


def _swap_last(ndim: int) -> list[int]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 3:
        raise ValueError(f"expected (..., n, heads, head_dim), got {q.shape}")


def full_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    _check_qkv(q, k, v)
    out = _attend(_to_heads(q), _to_heads(k), _to_heads(v), causal_mask(q.shape[-3]))
    return _to_heads(out)


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    _check_qkv(q, k, v)
    out = _attend(_to_heads(q), _to_heads(k), _to_heads(v), window_mask(q.shape[-3], window))
    return _to_heads(out)


def aha_block(
    x: Tensor,
    weights: AHABlockWeights,
    cfg: AHAConfig,
    bias_override: float | None = None,
) -> tuple[Tensor, GateMatrix]:
    """One all-or-here attention block on normalized hidden states ``x``.

    Both attention paths are computed densely; each token-head pair keeps
    the output of the path its hard gate selects.  ``bias_override``
    replaces the router bias with a constant, which is how gates are forced
    open (large positive) or shut (large negative).
    """
    x = ad.as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    m, hd = cfg.num_heads, cfg.head_dim
    if n < 1:
        raise ValueError("aha_block needs at least one token")
    if d != cfg.model_dim:
        raise ValueError(f"input width {d} does not match model_dim {cfg.model_dim}")

    bias = weights.router_bias
    if bias_override is not None:
        bias = Tensor(np.full(m, bias_override), dtype=x.dtype)
    s = router_scores(x, weights.w_router, bias)
    g = ad.ste_threshold(s, cfg.tau)

    lead = x.shape[:-2]
    q = _to_heads(ad.reshape(ad.matmul(x, weights.w_q), lead + (n, m, hd)))
    k = _to_heads(ad.reshape(ad.matmul(x, weights.w_k), lead + (n, m, hd)))
    v = _to_heads(ad.reshape(ad.matmul(x, weights.w_v), lead + (n, m, hd)))

    logits = ad.scale(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(hd))
    full = ad.matmul(ad.softmax_row(logits, causal_mask(n)), v)
    local = ad.matmul(ad.softmax_row(logits, window_mask(n, cfg.window)), v)

    # gates (..., n, m) -> (..., m, n, 1) to line up with the head-major branches
    g_heads = _to_heads(ad.reshape(g, lead + (n, m, 1)))
    mixed = ad.gated_select(g_heads, full, local)

    concat = ad.reshape(_to_heads(mixed), lead + (n, d))
    out = ad.matmul(concat, weights.w_o)
    return out, GateMatrix(values=g.data.copy(), scores=s.data.copy(), score_tensor=s)


def conditional_attention_loop(q, k, v, gates, window: int) -> np.ndarray:
    """Inference-style routed attention, one token-head pair at a time.

    For closed gates the keys are truncated to the last ``window`` positions
    before scoring, so only the selected path is ever evaluated.  Plain
    numpy, no tape.  Arrays are ``(n, m, hd)``; ``gates`` is ``(n, m)``.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, m, hd = q.shape
    out = np.zeros_like(q)
    for i in range(n):
        for j in range(m):
            lo = 0 if gates[i, j] else max(0, i - window + 1)
            keys, vals = k[lo:i + 1, j], v[lo:i + 1, j]
            z = keys @ q[i, j] / math.sqrt(hd)
            p = np.exp(z - z.max())
            out[i, j] = (p / p.sum()) @ vals
    return out


def causal_independence_check(block, x, i: int, trials: int = 1, atol: float = 1e-6, seed: int = 0) -> bool:
    """True iff perturbing rows after position ``i`` leaves rows ``<= i`` unchanged.

    ``block`` maps an ``(n, d)`` array (or Tensor) to an ``(n, ...)`` output.
    ``i`` is 1-indexed: outputs at positions ``1..i`` must not move.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    n = x.shape[0]
    if not 1 <= i <= n:
        raise ValueError(f"position {i} outside 1..{n}")
    rng = np.random.default_rng(seed)

    def run(arr):
        out = block(Tensor(arr, dtype=arr.dtype))
        return np.asarray(out.data if isinstance(out, Tensor) else out)

    with ad.no_grad():
        base = run(x)[:i]
        for _ in range(trials):
            pert = x.copy()
            pert[i:] += rng.normal(size=pert[i:].shape).astype(x.dtype)
            if not np.allclose(run(pert)[:i], base, rtol=0.0, atol=atol):
                return False
    return True
