import math

import numpy as np
import pytest

from deepbayes import attacks as atk
from deepbayes import autodiff as ad
from deepbayes.autodiff import GradientTape
from deepbayes.bnn import MlpClassifier, MlpConfig, train_classifier
from deepbayes.data import sample_two_rings
from deepbayes.detection import CalibrationMode, calibrate
from deepbayes.models import ModelConfig, build_model, predict, train
from deepbayes.rng import RngStream
from deepbayes.tworings import TwoRingsClassifier, TwoRingsSpec

from .conftest import numeric_grad, rel_err
from .oracles import linear_classifier

BOX_SPEC = TwoRingsSpec().affine(-2.5, 2.5)


@pytest.fixture(scope="module")
def toy():
    ds = sample_two_rings(BOX_SPEC, 300, RngStream(0))
    m = MlpClassifier.build(MlpConfig(2, 2, (32, 32), dropout=0.0, K=1), RngStream(1))
    train_classifier(m, ds.inputs, ds.labels, 60, RngStream(2), batch_size=50, learning_rate=3e-3)
    test = sample_two_rings(BOX_SPEC, 100, RngStream(3))
    return m, test.inputs, test.labels


def _ce(model, x, y):
    return atk.ce_loss(model.class_logits(x, K=1), y).item()


def test_eps_zero_is_identity(toy):
    m, x, y = toy
    assert np.array_equal(atk.fgsm(m, x, y, 0.0, K=1), x)
    cfg = atk.AttackConfig(eps=0.0)
    assert np.array_equal(atk.pgd(m, x, y, cfg, RngStream(0)), x)


def test_fgsm_clips_to_box():
    W = np.array([[0.0, 1.0], [0.0, 0.0]])
    lin = linear_classifier(W, np.zeros(2))
    x = np.array([[0.95, 0.5]])
    # cross-entropy at label 0 grows with x0, so the step is +0.1 and clips at 1
    out = atk.fgsm(lin, x, np.array([0]), 0.1, K=1)
    assert out[0, 0] == 1.0


def test_fgsm_ascends_loss_on_two_rings():
    clf = TwoRingsClassifier(TwoRingsSpec())
    x = sample_two_rings(TwoRingsSpec(), 20, RngStream(4)).inputs
    y = predict(clf.class_logits(x))[0]
    before = atk.ce_loss(clf.class_logits(x), y).item()
    out = atk.fgsm(clf, x, y, 1e-3, K=1, box=(-5, 5))
    assert atk.ce_loss(clf.class_logits(out), y).item() >= before


def test_fgsm_monotone_in_budget(toy):
    m, x, y = toy
    interior = (x > 0.2).all(axis=1) & (x < 0.8).all(axis=1)
    xi, yi = x[interior][:10], y[interior][:10]
    losses = [_ce(m, atk.fgsm(m, xi, yi, e, K=1), yi) for e in (0.0, 0.01, 0.02, 0.05)]
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))


def test_pgd_invariants_each_step(toy):
    m, x, y = toy
    cfg = atk.AttackConfig(eps=0.1, iterations=10)

    def check(_, xa):
        assert np.abs(xa - x).max() <= 0.1 + 1e-9
        assert xa.min() >= 0.0 and xa.max() <= 1.0

    atk.pgd(m, x, y, cfg, RngStream(0), on_step=check)
    atk.mim(m, x, y, cfg, RngStream(0), on_step=check)


def test_pgd_at_least_fgsm(toy):
    m, x, y = toy
    x2 = np.concatenate([x, x])
    y2 = np.concatenate([y, y])
    f = atk.fgsm(m, x2, y2, 0.3, K=1)
    p = atk.pgd(m, x2, y2, atk.AttackConfig(eps=0.3), RngStream(0))
    sf = (predict(m.class_logits(f))[0] != y2).mean()
    sp = (predict(m.class_logits(p))[0] != y2).mean()
    assert sp >= sf


def test_mim_without_momentum_is_iterative_fgsm(toy):
    m, x, y = toy
    cfg = atk.AttackConfig(eps=0.2, decay=0.0, iterations=15)
    a = atk.mim(m, x, y, cfg, RngStream(5))
    b = atk.iterative_fgsm(m, x, y, cfg, RngStream(5))
    assert np.array_equal(a, b)


def test_mim_zero_gradient_guard():
    lin = linear_classifier(np.zeros((2, 2)), np.zeros(2))
    x = np.array([[0.5, 0.5]])
    out = atk.mim(lin, x, np.array([0]), atk.AttackConfig(eps=0.1), RngStream(0))
    assert np.array_equal(out, x)


def test_cw_zero_c_is_noop(toy):
    m, x, y = toy
    res = atk.cw_l2(m, x, y, 0.0, atk.AttackConfig(kind="cw"), RngStream(0))
    assert np.array_equal(res.x_adv, x)
    assert not res.success.any() and (res.distortion == 0).all()


def test_cw_matches_linear_projection_distance():
    W = np.array([[2.0, -1.0], [-1.0, 1.5]])
    b = np.array([0.1, -0.2])
    lin = linear_classifier(W, b)
    x = np.array([[0.3, 0.6], [0.7, 0.3], [0.45, 0.55]])
    y = predict(lin.class_logits(x))[0]
    w = W[:, 1] - W[:, 0]
    d_true = np.abs(x @ w + (b[1] - b[0])) / np.linalg.norm(w)
    cfg = atk.AttackConfig(kind="cw", cw_iterations=1000)
    res = atk.cw_l2(lin, x, y, 10.0, cfg, RngStream(0))
    assert res.success.all()
    got = np.sqrt(res.distortion)
    assert np.all(np.abs(got - d_true) <= 0.05 * d_true)


def test_cw_history_nonincreasing(toy):
    m, x, y = toy
    res = atk.cw_l2(m, x[:10], y[:10], 10.0, atk.AttackConfig(kind="cw", cw_iterations=50), RngStream(0))
    h = np.array(res.best_history)
    assert (h[1:] <= h[:-1]).all()
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


def test_cw_learning_rate_schedule():
    assert atk.cw_learning_rate(1.0) == 0.01
    assert atk.cw_learning_rate(100.0) == 0.03
    assert atk.cw_learning_rate(1000.0) == 0.1


def test_spsa_constant_loss_gives_zero():
    g = atk.spsa_gradient(lambda p: np.full(p.shape[0], 3.0), np.ones(4), 0.01, 100, RngStream(0))
    assert np.array_equal(g, np.zeros(4))


def test_spsa_linear_loss_unbiased():
    gvec = np.arange(1.0, 11.0)
    est = atk.spsa_gradient(lambda p: p @ gvec, np.zeros(10), 0.01, 2000, RngStream(1))
    cos = est @ gvec / (np.linalg.norm(est) * np.linalg.norm(gvec))
    assert cos >= 0.99


def test_spsa_respects_ball(toy):
    m, x, y = toy
    cfg = atk.AttackConfig(kind="spsa", eps=0.05, spsa_samples=64, spsa_iterations=5)
    out = atk.spsa(m, x[:5], y[:5], cfg, RngStream(0))
    assert np.abs(out - x[:5]).max() <= 0.05 + 1e-9
    assert out.min() >= 0 and out.max() <= 1


@pytest.fixture(scope="module")
def gbz():
    ds = sample_two_rings(BOX_SPEC, 100, RngStream(0))
    m = build_model(ModelConfig("GBZ", 2, 2, hidden=(16,), obs_var=BOX_SPEC.noise_var), RngStream(1))
    train(m, ds.inputs, ds.labels, 5, RngStream(2))
    cal = calibrate(m, ds.inputs, ds.labels, CalibrationMode.target_fpr(0.05), 5, RngStream(3))
    return m, cal, ds.inputs[:8], ds.labels[:8]


def test_wbs_lambda_zero_reduces_to_sampled_loss(gbz):
    m, cal, x, y = gbz
    noise = m.draw_noise(len(x), 5, RngStream(4))
    lw = m.sample_log_weights(x, noise).data
    manual = sum(
        lw[k, n, y[n]] - np.logaddexp.reduce(lw[k, n]) for k in range(lw.shape[0]) for n in range(len(x))
    )
    assert atk.wbs_objective(m, cal, x, y, noise, 0.0, "logit").item() == pytest.approx(manual, rel=1e-12)
    cfg0 = atk.AttackConfig(kind="wbs", eps=0.1, lambda_detect=0.0, detector="logit", K=5, iterations=5)
    a = atk.wbs_detection_aware(m, cal, x, y, cfg0, RngStream(6), noise=noise)
    b = atk.wbs_detection_aware(m, None, x, y, cfg0, RngStream(6), noise=noise)
    assert np.array_equal(a, b)


def test_wbs_inactive_hinge(gbz):
    m, cal, x, y = gbz
    noise = m.draw_noise(len(x), 5, RngStream(4))
    lg = m.class_logits(x, noise=noise)
    phi, thr = atk.detector_statistic("marginal", lg, cal)
    keep = phi.data < thr
    if not keep.any():
        pytest.skip("no accepted inputs")
    xs, ys, ns = x[keep], y[keep], noise[:, :, keep]
    grads = []
    for lam in (0.0, 10.0):
        with GradientTape() as tape:
            xt = tape.watch(xs, "x")
            obj = atk.wbs_objective(m, cal, xt, ys, ns, lam, "marginal")
        grads.append(tape.backward(obj)["x"])
    assert np.array_equal(grads[0], grads[1])


@pytest.mark.parametrize("detector", ["marginal", "logit", "KL"])
def test_wbs_gradient_matches_fd(gbz, detector):
    m, cal, x, y = gbz
    noise = m.draw_noise(len(x), 5, RngStream(4))
    eta = RngStream(7).uniform(x.shape) * 0.02 - 0.01

    def f(v):
        return atk.wbs_objective(m, cal, v, y, noise, 1.0, detector).item()

    with GradientTape() as tape:
        xt = tape.watch(x + eta, "x")
        obj = atk.wbs_objective(m, cal, xt, y, noise, 1.0, detector)
    g = tape.backward(obj)["x"]
    assert rel_err(g, numeric_grad(f, x + eta)) < 1e-5


def test_wbs_unavailable_detector():
    m = build_model(ModelConfig("DFX", 2, 2, hidden=(4,)), RngStream(0))
    ds = sample_two_rings(BOX_SPEC, 10, RngStream(1))
    cal = calibrate(m, ds.inputs, ds.labels, CalibrationMode.target_fpr(0.05), 2, RngStream(2))
    cfg = atk.AttackConfig(kind="wbs", lambda_detect=1.0, detector="marginal")
    with pytest.raises(atk.DensityUnavailableError):
        atk.wbs_detection_aware(m, cal, ds.inputs, ds.labels, cfg, RngStream(0))


def test_attack_determinism(toy):
    m, x, y = toy
    cfg = atk.AttackConfig(kind="pgd", eps=0.1, iterations=5)
    a = atk.run_attack(m, x, y, cfg, RngStream(1))
    b = atk.run_attack(m, x, y, cfg, RngStream(1))
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        atk.AttackConfig(eps=-0.1)
    with pytest.raises(ValueError):
        atk.AttackConfig(iterations=-1)
    with pytest.raises(ValueError):
        atk.AttackConfig(step_size=0)
    with pytest.raises(ValueError):
        atk.run_attack(None, np.zeros((1, 2)), np.zeros(1), atk.AttackConfig(kind="ead"), RngStream(0))


def test_margin_loss_value():
    lg = np.array([[3.0, 1.0, 2.5]])
    assert atk.margin_loss(lg, np.array([0])).data[0] == pytest.approx(0.5)
    assert atk.margin_loss(lg, np.array([1])).data[0] == pytest.approx(-2.0)
    assert math.isfinite(atk.ce_loss(ad.as_tensor(lg), np.array([1])).item())
