import itertools

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from aha.analysis import mu_f
from aha.estimator import AHALanguageModel, check_samples
from aha.model import init_params
from aha.tasks import MixConfig, TaskSample, gen_counting, mixed_stream

MIX = MixConfig(length=20, needle_distance=(2, 15), local_orders=(2, 4))
SMALL = dict(vocab_size=64, model_dim=16, num_layers=1, num_heads=2, max_seq_len=20, window=4,
             steps=4, batch_size=4, lr=3e-3, lam=0.05)


def samples(count=12, seed=0):
    return list(itertools.islice(mixed_stream(seed, MIX), count))


def test_params_round_trip_and_clone():
    est = AHALanguageModel(**SMALL)
    assert est.get_params()["window"] == 4
    est.set_params(window=6, lam=0.1)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "params_")


def test_fit_predict_score_transform():
    X = samples()
    est = AHALanguageModel(**SMALL).fit(X)
    assert len(est.history_) == 4 and 0.0 <= est.mu_f_ <= 1.0
    assert est.predict(X).shape == (12, 20)
    assert 0.0 <= est.score(X) <= 1.0
    usage = est.transform(X)
    assert usage.shape == (12, 20) and ((usage >= 0) & (usage <= 1)).all()
    assert est.usage_report(X).mu_f_overall == pytest.approx(usage.mean())
    assert mu_f(est.gate_traces(X, force_gates="all-local")) == 0.0


def test_fit_is_deterministic_and_accepts_streams():
    X = samples()
    a = AHALanguageModel(**SMALL).fit(X)
    b = AHALanguageModel(**SMALL).fit(X)
    assert a.history_ == b.history_
    c = AHALanguageModel(**SMALL).fit(mixed_stream(0, MIX))
    assert len(c.history_) == 4


def test_fit_with_initial_parameters():
    est = AHALanguageModel(**SMALL)
    start = init_params(est._configs()[0])
    est.fit(samples(), init=start)
    assert est.params_ is start


def test_unfitted_estimator_raises():
    with pytest.raises(NotFittedError):
        AHALanguageModel(**SMALL).predict(samples(2))


def test_bad_force_gates():
    with pytest.raises(ValueError, match="force_gates"):
        AHALanguageModel(**SMALL, force_gates="some").fit(samples(2))


def test_check_samples_accepts_several_forms():
    toks = np.array([[1, 2, 3], [4, 5, 6]])
    bare = check_samples(toks)
    assert [s.loss_mask.tolist() for s in bare] == [[True, True, False]] * 2
    pair = check_samples((toks, np.array([[0, 1, 0], [1, 0, 0]], dtype=bool)))
    assert pair[0].loss_mask.tolist() == [False, True, False]
    assert len(check_samples(gen_counting(0, 16))) == 1


@pytest.mark.parametrize("X,err", [
    ([], ValueError),
    (np.array([[0.5, 1.0]]), ValueError),
    ([gen_counting(0, 16), gen_counting(0, 17)], ValueError),
    ([1, 2, 3], TypeError),
])
def test_check_samples_rejects(X, err):
    with pytest.raises(err):
        check_samples(X)


def test_check_samples_vocab_bound():
    with pytest.raises(ValueError, match="vocab_size"):
        check_samples([TaskSample([1, 40], [True, False])], vocab_size=32)
