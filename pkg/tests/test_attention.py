import math

import numpy as np
import pytest

from aha import autodiff as ad
from aha.attention import (AHABlockWeights, AHAConfig, GateMatrix, aha_block, causal_independence_check,
                           causal_mask, conditional_attention_loop, full_attention, router_scores,
                           sliding_window_attention, window_mask)
from aha.autodiff import Tensor


def naive_attention(q, k, v, window=None):
    """Per-position, per-head loop over an explicit key range (1-indexed window semantics)."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, m, hd = q.shape
    out = np.zeros_like(q)
    for i in range(n):
        lo = 0 if window is None else max(0, i - window + 1)
        for h in range(m):
            z = np.array([q[i, h] @ k[j, h] for j in range(lo, i + 1)]) / math.sqrt(hd)
            p = np.exp(z - z.max())
            p /= p.sum()
            out[i, h] = sum(p[j - lo] * v[j, h] for j in range(lo, i + 1))
    return out


def random_weights(rng, d, m, scale=0.3, bias=0.0):
    mk = lambda *s: Tensor(rng.normal(size=s) * scale, requires_grad=True)  # noqa: E731
    return AHABlockWeights(mk(d, d), mk(d, d), mk(d, d), mk(d, d), mk(d, m),
                           Tensor(np.full(m, bias) + rng.normal(size=m), requires_grad=True))


def test_masks_match_definition():
    assert causal_mask(3).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    # w=2: token i sees i-1 and i
    assert window_mask(4, 2).astype(int).tolist() == [[1, 0, 0, 0], [1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]]
    assert window_mask(5, 1).sum() == 5


@pytest.mark.parametrize("case", range(10))
def test_full_and_window_match_naive_loop(case):
    rng = np.random.default_rng(case)
    n, m, hd = int(rng.integers(1, 12)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
    w = int(rng.integers(1, n + 1))
    q, k, v = (rng.normal(size=(n, m, hd)).astype(np.float32) for _ in range(3))
    np.testing.assert_allclose(full_attention(q, k, v).data, naive_attention(q, k, v), atol=1e-6)
    np.testing.assert_allclose(sliding_window_attention(q, k, v, w).data, naive_attention(q, k, v, w), atol=1e-6)


def test_window_of_one_returns_own_value():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(5, 2, 3)) for _ in range(3))
    np.testing.assert_allclose(sliding_window_attention(q, k, v, 1).data, v, atol=1e-6)


def test_window_at_least_length_equals_full():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(6, 2, 4)) for _ in range(3))
    for w in (6, 7, 100):
        np.testing.assert_allclose(sliding_window_attention(q, k, v, w).data, full_attention(q, k, v).data, atol=1e-6)


def test_batched_attention_matches_per_sample():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(3, 7, 2, 4)) for _ in range(3))
    batched = sliding_window_attention(q, k, v, 3).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], sliding_window_attention(q[b], k[b], v[b], 3).data, atol=1e-6)


def test_attention_input_validation():
    x = np.zeros((4, 2, 3))
    with pytest.raises(ValueError):
        full_attention(x, x, np.zeros((4, 2, 2)))
    with pytest.raises(ValueError):
        sliding_window_attention(x, x, x, 0)
    with pytest.raises(ValueError):
        full_attention(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)))


@pytest.mark.parametrize("kwargs", [dict(model_dim=10, num_heads=3, window=2), dict(model_dim=8, num_heads=2, window=0),
                                    dict(model_dim=8, num_heads=2, window=2, tau=1.0)])
def test_aha_config_validation(kwargs):
    with pytest.raises(ValueError):
        AHAConfig(**kwargs)


def test_block_weight_validation():
    rng = np.random.default_rng(0)
    cfg = AHAConfig(8, 2, 3)
    w = random_weights(rng, 8, 2)
    w.validate(cfg)
    w.w_router = Tensor(np.zeros((8, 3)))
    with pytest.raises(ValueError, match="w_router"):
        w.validate(cfg)


def test_router_scores_in_unit_interval_and_shape_checked():
    rng = np.random.default_rng(0)
    s = router_scores(Tensor(rng.normal(size=(5, 8)) * 10), Tensor(rng.normal(size=(8, 2))), Tensor(np.zeros(2)))
    assert s.shape == (5, 2) and ((s.data > 0) & (s.data < 1)).all()
    with pytest.raises(ValueError):
        router_scores(Tensor(np.zeros((5, 8))), Tensor(np.zeros((7, 2))), Tensor(np.zeros(2)))


def _branch_outputs(x, w, cfg):
    n = x.shape[0]
    m, hd = cfg.num_heads, cfg.head_dim
    q, k, v = ((x @ getattr(w, name).data).reshape(n, m, hd) for name in ("w_q", "w_k", "w_v"))
    return q, k, v


def test_aha_block_matches_conditional_loop(f64):
    rng = np.random.default_rng(4)
    cfg = AHAConfig(model_dim=12, num_heads=3, window=3)
    w = random_weights(rng, 12, 3)
    x = rng.normal(size=(9, 12))
    out, gates = aha_block(Tensor(x), w, cfg)
    assert 0 < gates.values.mean() < 1  # the fixture exercises both paths
    q, k, v = _branch_outputs(x, w, cfg)
    routed = conditional_attention_loop(q, k, v, gates.values.astype(bool), cfg.window)
    np.testing.assert_allclose(out.data, routed.reshape(9, 12) @ w.w_o.data, atol=1e-10)


def test_gates_threshold_router_scores_strictly(f64):
    rng = np.random.default_rng(5)
    cfg = AHAConfig(8, 2, 2, tau=0.5)
    w = random_weights(rng, 8, 2)
    _, gates = aha_block(Tensor(rng.normal(size=(6, 8))), w, cfg)
    np.testing.assert_array_equal(gates.values, (gates.scores > 0.5).astype(float))
    assert isinstance(gates, GateMatrix) and gates.usage == gates.values.mean()


@pytest.mark.parametrize("bias,reference", [(10.0, None), (-10.0, 2)])
def test_bias_forcing_selects_one_branch(f64, bias, reference):
    rng = np.random.default_rng(6)
    cfg = AHAConfig(8, 2, 2)
    w = random_weights(rng, 8, 2, scale=0.05)
    x = rng.normal(size=(7, 8))
    out, gates = aha_block(Tensor(x), w, cfg, bias_override=bias)
    assert gates.values.all() if bias > 0 else not gates.values.any()
    q, k, v = _branch_outputs(x, w, cfg)
    ref = naive_attention(q, k, v, reference).reshape(7, 8) @ w.w_o.data
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_single_token_routes_to_identical_branches():
    rng = np.random.default_rng(7)
    cfg = AHAConfig(4, 1, 1)
    w = random_weights(rng, 4, 1)
    x = Tensor(rng.normal(size=(1, 4)))
    a, _ = aha_block(x, w, cfg, bias_override=10.0)
    b, _ = aha_block(x, w, cfg, bias_override=-10.0)
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_block_is_causal():
    rng = np.random.default_rng(8)
    cfg = AHAConfig(8, 2, 3)
    w = random_weights(rng, 8, 2)
    x = rng.normal(size=(10, 8))
    block = lambda t: aha_block(t, w, cfg)[0]  # noqa: E731
    for i in (1, 4, 9):
        assert causal_independence_check(block, x, i, trials=3)


def test_causal_independence_check_detects_leak():
    leaky = lambda t: ad.tsum(t, axis=0, keepdims=True) + t  # noqa: E731
    assert not causal_independence_check(leaky, np.ones((4, 2)), 2)
    with pytest.raises(ValueError):
        causal_independence_check(leaky, np.ones((4, 2)), 0)


def test_batched_block_matches_per_sample():
    rng = np.random.default_rng(9)
    cfg = AHAConfig(8, 2, 3)
    w = random_weights(rng, 8, 2)
    x = rng.normal(size=(3, 6, 8)).astype(np.float32)
    out, gates = aha_block(Tensor(x), w, cfg)
    for b in range(3):
        o, g = aha_block(Tensor(x[b]), w, cfg)
        np.testing.assert_allclose(out.data[b], o.data, atol=1e-6)
        np.testing.assert_array_equal(gates.values[b], g.values)


def test_aha_block_rejects_wrong_width():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="model_dim"):
        aha_block(Tensor(np.zeros((3, 6))), random_weights(rng, 8, 2), AHAConfig(8, 2, 2))
