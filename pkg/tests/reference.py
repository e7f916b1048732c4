"""Plain-numpy decoder used as an oracle: every head uses one fixed attention kind."""
import math

import numpy as np

from aha.model import sinusoidal_positions


def _rmsnorm(x, gain, eps=1e-6):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * gain


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _attend(q, k, v, window):
    n, m, hd = q.shape
    out = np.zeros_like(q)
    for i in range(n):
        lo = 0 if window is None else max(0, i - window + 1)
        for h in range(m):
            z = k[lo:i + 1, h] @ q[i, h] / math.sqrt(hd)
            p = np.exp(z - z.max())
            out[i, h] = (p / p.sum()) @ v[lo:i + 1, h]
    return out


def reference_forward(params, cfg, tokens, window=None):
    """Logits for one sequence with full attention (``window=None``) or a fixed window everywhere."""
    P = {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    n, d, m = len(tokens), cfg.model_dim, cfg.num_heads
    x = P["embed"][np.asarray(tokens)] + sinusoidal_positions(n, d)
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h = _rmsnorm(x, P[p + "attn_norm"])
        q, k, v = ((h @ P[p + name]).reshape(n, m, d // m) for name in ("w_q", "w_k", "w_v"))
        x = x + _attend(q, k, v, window).reshape(n, d) @ P[p + "w_o"]
        x = x + _gelu(_rmsnorm(x, P[p + "mlp_norm"]) @ P[p + "w_in"]) @ P[p + "w_out"]
    return _rmsnorm(x, P["final_norm"]) @ P["lm_head"]
