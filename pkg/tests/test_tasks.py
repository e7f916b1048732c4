import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aha.tasks import (BOS, FILLER, KEYS, KV_MARK, QUERY, SEP, VALUES, MixConfig, TaskSample, gen_counting,
                       gen_local_lm, gen_needle, local_lm_entropy_rate, local_lm_table, mixed_stream,
                       order_alphabets, read_jsonl, stack, symbol, task_samples, write_jsonl)


def test_counting_spells_consecutive_numbers():
    s = gen_counting(0, 20, start=98)
    text = "".join(symbol(int(t)) for t in s.tokens[1:])
    assert s.tokens[0] == BOS and text.startswith("98,99,100,101,")
    assert len(s) == 20 and s.meta["start"] == 98
    assert not s.loss_mask[:4].any() and s.loss_mask[4:19].all() and not s.loss_mask[-1]


def test_counting_rejects_short_sequences():
    with pytest.raises(ValueError):
        gen_counting(0, 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(12, 80), st.data())
def test_needle_layout(seed, length, data):
    kd = data.draw(st.integers(2, length - 5))
    s = gen_needle(seed, length, kd)
    answer = length - 2
    value_pos = answer - kd
    assert s.tokens[0] == BOS
    assert tuple(s.tokens[value_pos - 2:value_pos + 1]) == (KV_MARK, s.meta["key"], s.meta["value"])
    assert tuple(s.tokens[-3:]) == (QUERY, s.meta["key"], s.meta["value"])
    assert np.flatnonzero(s.loss_mask).tolist() == [answer]
    assert s.meta["key"] in KEYS and s.meta["value"] in VALUES
    assert (s.tokens == KV_MARK).sum() == 1 and (s.tokens == QUERY).sum() == 1


def test_needle_value_is_unpredictable_from_the_key():
    values = {gen_needle(seed, 30, 10).meta["value"] for seed in range(200)}
    assert len(values) == len(VALUES)


@pytest.mark.parametrize("kd", [1, 26])
def test_needle_distance_bounds(kd):
    with pytest.raises(ValueError):
        gen_needle(0, 30, kd)


def test_local_lm_depends_only_on_lag():
    alphabet = FILLER[:8]
    table = local_lm_table(3, 0, 8)
    np.testing.assert_allclose(table.sum(1), 1.0)
    s = gen_local_lm(1, 200, 3, alphabet=alphabet)
    sym = np.array([alphabet.index(t) for t in s.tokens[1:]])
    # every transition must have non-negligible probability under the lag-3 table
    probs = table[sym[:-3], sym[3:]]
    assert (probs > 0).all()
    assert s.loss_mask[3:-1].all() and not s.loss_mask[:3].any()


def test_local_lm_empirical_transitions_match_table():
    alphabet = FILLER[:4]
    table = local_lm_table(2, 5, 4)
    counts = np.zeros((4, 4))
    for seed in range(60):
        sym = [alphabet.index(t) for t in gen_local_lm(seed, 300, 2, 5, alphabet).tokens[1:]]
        for a, b in zip(sym, sym[2:]):
            counts[a, b] += 1
    empirical = counts / counts.sum(1, keepdims=True)
    np.testing.assert_allclose(empirical, table, atol=0.03)


def test_local_lm_entropy_rate_matches_power_iteration():
    table = local_lm_table(4, 0, 16)
    pi = np.full(16, 1 / 16)
    for _ in range(5000):
        pi = pi @ table
    rows = [-sum(p * np.log(p) for p in row if p > 0) for row in table]
    h = local_lm_entropy_rate(4, 0, 16)
    assert h == pytest.approx(float(pi @ rows), abs=1e-9)
    assert 0 < h < np.log(16)


def test_local_lm_table_is_read_only():
    with pytest.raises(ValueError):
        local_lm_table(2)[0, 0] = 1.0


def test_order_alphabets_are_disjoint():
    alph = order_alphabets((4, 8, 16))
    assert not set(alph[4]) & set(alph[8]) and not set(alph[8]) & set(alph[16])
    with pytest.raises(ValueError):
        order_alphabets(tuple(range(1, 10)))


def test_mixed_stream_is_reproducible_and_mixed():
    mix = MixConfig(length=32, needle_distance=(2, 27), local_orders=(2, 4))
    a = list(itertools.islice(mixed_stream(3, mix), 60))
    b = list(itertools.islice(mixed_stream(3, mix), 60))
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))
    assert {s.meta["task"] for s in a} == {"counting", "needle", "local_lm"}
    assert [s.meta["sample_id"] for s in a] == list(range(60))
    assert all(len(s) == 32 for s in a)


def test_mix_config_validation():
    with pytest.raises(ValueError):
        MixConfig(weights=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        MixConfig(length=20, needle_distance=(2, 30))
    with pytest.raises(ValueError):
        MixConfig(length=20, local_orders=(30,))


def test_task_samples_single_task_and_fixed_distance():
    mix = MixConfig(length=40, needle_distance=(2, 35))
    needles = task_samples("needle", 0, 5, mix, key_distance=20)
    assert all(s.meta["key_distance"] == 20 for s in needles)
    assert {s.meta["task"] for s in task_samples("local_lm", 0, 5, mix)} == {"local_lm"}
    with pytest.raises(ValueError):
        task_samples("poetry", 0, 1, mix)


def test_sample_validation():
    with pytest.raises(ValueError):
        TaskSample([1, 2], [False, False])
    with pytest.raises(ValueError):
        TaskSample([1, 64], [True, False])
    with pytest.raises(ValueError):
        TaskSample([1, 2], [True])


def test_jsonl_round_trip(tmp_path):
    samples = [gen_counting(0, 16), gen_needle(1, 16, 5)]
    assert write_jsonl(samples, tmp_path / "s.jsonl") == 2
    back = read_jsonl(tmp_path / "s.jsonl")
    assert all(np.array_equal(a.tokens, b.tokens) and np.array_equal(a.loss_mask, b.loss_mask)
               and a.meta == b.meta for a, b in zip(samples, back))


def test_stack_requires_equal_lengths():
    tokens, mask = stack([gen_counting(0, 16), gen_counting(1, 16)])
    assert tokens.shape == mask.shape == (2, 16)
    with pytest.raises(ValueError):
        stack([gen_counting(0, 16), gen_counting(0, 17)])


def test_symbols():
    assert [symbol(t) for t in (3, SEP, BOS, KEYS[2], VALUES[0], FILLER[5])] == ["3", ",", "<bos>", "k2", "v0", "f5"]
