import math

import numpy as np
import pytest

from deepbayes.detection import (
    CalibrationMode,
    DetectorCalibration,
    calibrate,
    calibrate_from_logits,
    combined_rejection,
    decide,
    detect_all,
    detect_logit,
    detect_marginal,
    divergence,
    rejected_count,
    threshold_from_statistics,
)
from deepbayes.models import DensityUnavailableError, ModelConfig, build_model
from deepbayes.rng import RngStream
from deepbayes.data import sample_two_rings
from deepbayes.tworings import TwoRingsClassifier, TwoRingsSpec, two_rings_logits

SPEC = TwoRingsSpec()


def test_alpha_zero_is_mean():
    v = np.random.default_rng(0).normal(size=100)
    mu, sd, thr = threshold_from_statistics(v, CalibrationMode.alpha(0))
    assert thr == mu == pytest.approx(v.mean())
    assert sd >= 0


def test_alpha_mode():
    v = np.arange(10.0)
    mu, sd, thr = threshold_from_statistics(v, CalibrationMode.alpha(2.0))
    assert thr == pytest.approx(v.mean() + 2 * v.std())


@pytest.mark.parametrize("n,rate", [(1000, 0.05), (2000, 0.10), (37, 0.10), (10, 0.0)])
def test_target_fpr_rejects_exact_count(n, rate):
    v = np.random.default_rng(n).normal(size=n)
    _, _, thr = threshold_from_statistics(v, CalibrationMode.target_fpr(rate))
    assert (v > thr).sum() == rejected_count(rate, n) == math.ceil(rate * n)


def test_heldout_fpr_concentrates():
    g = np.random.default_rng(4)
    train = g.normal(size=10_000)
    held = g.normal(size=10_000)
    _, _, thr = threshold_from_statistics(train, CalibrationMode.target_fpr(0.10))
    assert 0.07 <= (held > thr).mean() <= 0.13


def test_invalid_mode():
    with pytest.raises(ValueError):
        CalibrationMode("beta", 1.0)
    with pytest.raises(ValueError):
        CalibrationMode.target_fpr(1.5)


def test_divergence_examples_and_oracle():
    assert divergence("TV", np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0] == 1.0
    g = np.random.default_rng(0)
    p = g.dirichlet(np.ones(5), size=20)
    q = g.dirichlet(np.ones(5), size=20)
    kl = np.array([sum(pi * math.log(pi / qi) for pi, qi in zip(a, b)) for a, b in zip(p, q)])
    tv = np.array([0.5 * sum(abs(pi - qi) for pi, qi in zip(a, b)) for a, b in zip(p, q)])
    assert np.allclose(divergence("KL", p, q), kl, atol=1e-12)
    assert np.allclose(divergence("TV", p, q), tv, atol=1e-12)
    assert (divergence("KL", p, q) >= 0).all()
    assert np.allclose(divergence("KL", p, p), 0, atol=1e-12)


def test_kl_zero_entries():
    ref = np.array([[1.0, 0.0]])
    post = np.array([[0.5, 0.5]])
    assert divergence("KL", ref, post)[0] == pytest.approx(math.log(2))
    post0 = np.array([[0.0, 1.0]])
    assert divergence("KL", ref, post0)[0] == pytest.approx(-math.log(1e-12))


def _calib_two_rings(n=1000, rate=0.10, seed=0):
    ds = sample_two_rings(SPEC, n, RngStream(seed))
    logits = two_rings_logits(SPEC, ds.inputs)
    return ds, logits, calibrate_from_logits(logits, ds.labels, CalibrationMode.target_fpr(rate))


def test_training_fpr_exact_per_detector():
    ds, logits, cal = _calib_two_rings()
    N = len(ds)
    dec = detect_all(cal, logits)
    assert dec["marginal"].rejected.sum() == math.ceil(0.1 * N)
    for c in range(2):
        rows = ds.labels == c
        d = decide(cal, "logit", logits[rows], labels=ds.labels[rows])
        assert d.rejected.sum() == math.ceil(0.1 * rows.sum())


def test_boundary_inclusive():
    _, logits, cal = _calib_two_rings()
    # construct logits whose marginal statistic equals the threshold exactly
    lg = np.array([[-cal.marginal_threshold, -np.inf]])
    d = decide(cal, "marginal", lg)
    assert d.statistic[0] == d.threshold[0] and d.accepted[0]
    lg = np.array([[-cal.logit_threshold[0], -1e6]])
    d = decide(cal, "logit", lg)
    assert d.accepted[0]


def test_far_point_rejected_and_mode_accepted():
    _, _, cal = _calib_two_rings()
    clf = TwoRingsClassifier(SPEC)
    far = np.array([[0.0, 2.0 + 10 * SPEC.sigma]])
    assert detect_marginal(cal, clf, far).rejected[0]
    on_ring = np.array([[0.0, 1.0]])
    assert detect_marginal(cal, clf, on_ring).accepted[0]
    assert detect_logit(cal, clf, on_ring).accepted[0]
    assert detect_logit(cal, clf, on_ring, labels=np.array([1])).rejected[0]


def test_divergence_accepts_class_mean():
    _, _, cal = _calib_two_rings()
    lg = np.log(cal.class_mean_probs[[0]])
    for kind in ("KL", "TV"):
        d = decide(cal, kind, lg)
        assert d.statistic[0] == pytest.approx(0.0, abs=1e-12) and d.accepted[0]


def test_class_mean_probs_normalized():
    _, _, cal = _calib_two_rings()
    assert np.allclose(cal.class_mean_probs.sum(axis=1), 1.0, atol=1e-9)


def test_combined_is_superset():
    ds, logits, cal = _calib_two_rings()
    x = np.random.default_rng(0).uniform(-3, 3, size=(500, 2))
    dec = detect_all(cal, two_rings_logits(SPEC, x))
    comb = combined_rejection(dec)
    for d in dec.values():
        assert (comb >= d.rejected).all()


def test_discriminative_partial_calibration():
    m = build_model(ModelConfig("DFX", 2, 2, hidden=(4,)), RngStream(0))
    ds = sample_two_rings(SPEC, 20, RngStream(1))
    cal = calibrate(m, ds.inputs, ds.labels, CalibrationMode.target_fpr(0.05), K=2, rng=RngStream(2))
    assert cal.available == ("KL", "TV")
    with pytest.raises(DensityUnavailableError):
        cal.threshold("marginal")
    with pytest.raises(DensityUnavailableError):
        detect_marginal(cal, m, ds.inputs)


def test_calibration_json_roundtrip():
    _, logits, cal = _calib_two_rings(n=50)
    back = DetectorCalibration.from_dict(cal.to_dict())
    assert back.marginal_threshold == cal.marginal_threshold
    assert np.array_equal(back.logit_threshold, cal.logit_threshold)
    assert np.array_equal(back.class_mean_probs, cal.class_mean_probs)
    for k in ("KL", "TV"):
        assert np.array_equal(back.divergence_threshold[k], cal.divergence_threshold[k])


def test_marginal_acceptance_is_annular():
    _, _, cal = _calib_two_rings()
    s2 = SPEC.noise_var
    # accepted => 0.5 N(d0) + 0.5 N(d1) >= exp(-delta) => N(min(d0, d1)) >= exp(-delta)
    dmax = math.sqrt(2 * s2 * (cal.marginal_threshold - math.log(2 * math.pi * s2)))
    g = np.linspace(-3, 3, 241)
    X = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    acc = decide(cal, "marginal", two_rings_logits(SPEC, X)).accepted
    r = np.linalg.norm(X, axis=1)
    dist = np.minimum(np.abs(r - 1.0), np.abs(r - 2.0))
    assert acc.any()
    assert (dist[acc] <= dmax + 1e-9).all()
