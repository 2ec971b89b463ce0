import numpy as np
import pytest

from deepbayes.bnn import MlpClassifier, MlpConfig, bnn_config, bnn_predict, train_classifier
from deepbayes.data import sample_two_rings
from deepbayes.models import predict
from deepbayes.rng import RngStream
from deepbayes.substitute import SubstituteConfig, query_sizes, train_substitute
from deepbayes.tworings import TwoRingsClassifier, TwoRingsSpec

SPEC = TwoRingsSpec().affine(-2.5, 2.5)


def test_query_recurrence():
    sizes = query_sizes(2000, 6)
    assert sizes[-1] == 64_000
    assert all(b == 2 * a for a, b in zip(sizes, sizes[1:]))
    assert query_sizes(2000, 1) == [2000]
    with pytest.raises(ValueError):
        query_sizes(2000, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SubstituteConfig(outer_loops=0)
    with pytest.raises(ValueError):
        SubstituteConfig(lam=0.0)
    with pytest.raises(ValueError):
        SubstituteConfig(mode="white")


def test_single_loop_has_no_augmentation():
    victim = TwoRingsClassifier(SPEC)
    seed_x = sample_two_rings(SPEC, 10, RngStream(0)).inputs
    res = train_substitute(victim, SubstituteConfig(outer_loops=1, epochs_per_loop=1, hidden=(8,)), seed_x, RngStream(1))
    assert res.queries == 20 and res.dataset_sizes == [20]


@pytest.fixture(scope="module")
def black_box():
    victim = TwoRingsClassifier(SPEC)
    seed_x = sample_two_rings(SPEC, 100, RngStream(0)).inputs
    cfg = SubstituteConfig(outer_loops=6, hidden=(64, 64), learning_rate=3e-3)
    return victim, train_substitute(victim, cfg, seed_x, RngStream(1))


def test_black_box_doubles_each_loop(black_box):
    _, res = black_box
    assert res.dataset_sizes == query_sizes(200, 6)
    assert res.queries == 200 * 2**5 == res.inputs.shape[0]


def test_black_box_agreement(black_box):
    victim, res = black_box
    held = sample_two_rings(SPEC, 500, RngStream(9)).inputs
    v = predict(victim.class_logits(held))[0]
    s = predict(res.model.class_logits(held))[0]
    assert (v == s).mean() >= 0.90


def test_grey_box_uses_probabilities():
    victim = TwoRingsClassifier(SPEC)
    seed_x = sample_two_rings(SPEC, 100, RngStream(0)).inputs
    cfg = SubstituteConfig(mode="grey", hidden=(32, 32), grey_epochs=100, batch_size=20, learning_rate=3e-3)
    res = train_substitute(victim, cfg, seed_x, RngStream(1))
    assert res.queries == 200
    held = sample_two_rings(SPEC, 200, RngStream(9)).inputs
    agree = (predict(victim.class_logits(held))[0] == predict(res.model.class_logits(held))[0]).mean()
    assert agree >= 0.9


def test_bnn_width_multiplier():
    cfg = bnn_config(4, 3, (16, 8))
    assert cfg.hidden == (32, 16) and cfg.dropout == 0.3
    with pytest.raises(ValueError):
        MlpConfig(2, 2, dropout=1.0)


def test_bnn_zero_dropout_is_deterministic():
    m = MlpClassifier.build(MlpConfig(2, 2, (8,), dropout=0.0), RngStream(0))
    x = RngStream(1).normal((5, 2))
    _, p1 = bnn_predict(m, x, K=1, rng=RngStream(2))
    _, p10 = bnn_predict(m, x, K=10, rng=RngStream(3))
    assert np.allclose(p1, p10, atol=1e-14)


def test_bnn_dropout_seeded_and_stochastic():
    m = MlpClassifier.build(MlpConfig(2, 2, (16,), dropout=0.3), RngStream(0))
    x = RngStream(1).normal((5, 2))
    a = bnn_predict(m, x, K=10, rng=RngStream(2))[1]
    b = bnn_predict(m, x, K=10, rng=RngStream(2))[1]
    c = bnn_predict(m, x, K=10, rng=RngStream(3))[1]
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_bnn_trains_on_two_rings():
    ds = sample_two_rings(SPEC, 200, RngStream(0))
    m = MlpClassifier.build(bnn_config(2, 2, (16, 16)), RngStream(1))
    trace, _ = train_classifier(m, ds.inputs, ds.labels, 100, RngStream(2), batch_size=20, learning_rate=3e-3)
    assert trace[-1] < trace[0]
    acc = (bnn_predict(m, ds.inputs, K=10, rng=RngStream(3))[0] == ds.labels).mean()
    assert acc > 0.9
