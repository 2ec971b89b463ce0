"""Evasion attacks against any classifier exposing ``class_logits``.

White-box l-inf attacks (FGSM, PGD, MIM) ascend the cross-entropy at the
true label and redraw the classifier's samples at every gradient step.
CW-l2 optimises in tanh space; SPSA needs only logit values. The
detection-aware attack freezes one set of samples and descends the summed
per-sample log-posterior of the true class plus a hinge on a detector
statistic.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .detection import POSTERIOR_FLOOR
from .models import DensityUnavailableError, predict
from .optim import AdamState, adam_step

BOX = (0.0, 1.0)


@dataclass
class AttackConfig:
    kind: str = "pgd"
    eps: float = 0.3
    step_size: float = 0.01
    iterations: int = 40
    decay: float = 1.0
    random_start: bool = True
    K: int = 10
    # CW-l2
    c: float = 1.0
    cw_learning_rate: float = None
    cw_iterations: int = 1000
    confidence: float = 0.0
    # SPSA
    spsa_samples: int = 2000
    spsa_delta: float = 0.01
    spsa_learning_rate: float = 0.01
    spsa_iterations: int = 100
    spsa_stop: float = -5.0
    # detection-aware PGD
    lambda_detect: float = 0.0
    detector: str = "marginal"
    box: tuple = BOX
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        self.box = tuple(self.box)

    def to_dict(self):
        d = asdict(self)
        d["box"] = list(self.box)
        return d


def cw_learning_rate(c):
    """Learning rate schedule by balance constant (0.01 up to c=10, 0.03 at 100, 0.1 at 1000)."""
    if c >= 1000:
        return 0.1
    if c >= 100:
        return 0.03
    return 0.01


def project(x_adv, x, eps, box=BOX):
    """Coordinatewise clamp into the eps-ball around ``x`` and into the box."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), box[0], box[1])


def _labels(y):
    return np.asarray(y, dtype=np.int64)


def ce_loss(logits, y):
    """Summed cross-entropy at the true labels (per-input losses are independent)."""
    onehot = np.eye(logits.shape[1])[_labels(y)]
    return -(ad.log_softmax(logits) * onehot).sum()


def margin_loss(logits, y):
    """Per-input ``Z_true - max_{j != true} Z_j`` as a tensor of shape ``(N,)``."""
    logits = ad.as_tensor(logits)
    N, C = logits.shape
    onehot = np.eye(C)[_labels(y)]
    true = (logits * onehot).sum(axis=1)
    others = ad.where(onehot > 0, -np.inf, logits)
    return true - ad.max_(others, axis=1)


def loss_gradient(model, x, y, K, rng, noise=None):
    """``(loss, d loss / d x)`` for the summed cross-entropy."""
    with GradientTape() as tape:
        xt = tape.watch(x, "x")
        loss = ce_loss(model.class_logits(xt, K=K, rng=rng, noise=noise), y)
    return loss.item(), tape.backward(loss)["x"]


def fgsm(model, x, y, eps, K=10, rng=None, box=BOX):
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    _, g = loss_gradient(model, x, y, K, rng)
    return np.clip(x + eps * np.sign(g), box[0], box[1])


def pgd(model, x, y, config, rng, on_step=None):
    """Sign-gradient ascent with projection; optional uniform random start."""
    x = np.asarray(x, dtype=np.float64)
    eps, box = config.eps, config.box
    if eps == 0:
        return x.copy()
    x_adv = x.copy()
    if config.random_start:
        x_adv = project(x + eps * (2.0 * rng.uniform(x.shape) - 1.0), x, eps, box)
    for it in range(config.iterations):
        _, g = loss_gradient(model, x_adv, y, config.K, rng)
        x_adv = project(x_adv + config.step_size * np.sign(g), x, eps, box)
        if on_step is not None:
            on_step(it, x_adv)
    return x_adv


def mim(model, x, y, config, rng, on_step=None):
    """Momentum iterative method with L1-normalised gradient accumulation."""
    x = np.asarray(x, dtype=np.float64)
    eps, box = config.eps, config.box
    x_adv = x.copy()
    momentum = np.zeros_like(x)
    for it in range(config.iterations):
        _, g = loss_gradient(model, x_adv, y, config.K, rng)
        l1 = np.abs(g).sum(axis=1, keepdims=True)
        g = np.where(l1 < 1e-12, g, g / np.where(l1 < 1e-12, 1.0, l1))
        momentum = config.decay * momentum + g
        x_adv = project(x_adv + config.step_size * np.sign(momentum), x, eps, box)
        if on_step is not None:
            on_step(it, x_adv)
    return x_adv


def iterative_fgsm(model, x, y, config, rng):
    """Repeated FGSM steps of ``step_size`` projected to the eps-ball (no random start)."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(config.iterations):
        _, g = loss_gradient(model, x_adv, y, config.K, rng)
        x_adv = project(x_adv + config.step_size * np.sign(g), x, config.eps, config.box)
    return x_adv


@dataclass
class CWResult:
    x_adv: np.ndarray
    success: np.ndarray
    distortion: np.ndarray
    best_history: list


def cw_objective(model, w, x, y, c, K, rng, confidence=0.0, box=BOX, noise=None):
    """Per-input ``||x' - x||^2 + c * max(margin, -confidence)`` with ``x'`` from tanh space."""
    lo, hi = box
    x_new = (ad.tanh(w) + 1.0) * (0.5 * (hi - lo)) + lo
    dist = ((x_new - x) ** 2).sum(axis=1)
    logits = model.class_logits(x_new, K=K, rng=rng, noise=noise)
    hinge = ad.relu(margin_loss(logits, y) + confidence) - confidence
    return dist + c * hinge, x_new, logits


def cw_l2(model, x, y, c, config, rng):
    """Untargeted Carlini-Wagner l2 attack; keeps the lowest-distortion success.

    Inputs for which no iterate succeeds get the final iterate. With ``c = 0``
    the objective is pure distortion, whose optimum is ``x`` itself, so the
    attack is a no-op: zero distortion and no successes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _labels(y)
    if c == 0:
        n = x.shape[0]
        return CWResult(x.copy(), np.zeros(n, dtype=bool), np.zeros(n), [np.zeros(n)])
    lo, hi = config.box
    lr = config.cw_learning_rate or cw_learning_rate(c)
    u = np.clip((x - lo) / (hi - lo) * 2.0 - 1.0, -1.0 + 1e-12, 1.0 - 1e-12)
    params = {"w": np.arctanh(u)}
    state = AdamState(learning_rate=lr)
    best = x.copy()
    best_dist = np.full(x.shape[0], np.inf)
    success = np.zeros(x.shape[0], dtype=bool)
    history = []
    for _ in range(config.cw_iterations):
        with GradientTape() as tape:
            w = tape.watch(params["w"], "w")
            obj, x_new, logits = cw_objective(model, w, x, y, c, config.K, rng, config.confidence, config.box)
            total = obj.sum()
        grads = tape.backward(total)
        pred, _ = predict(logits)
        dist = ((x_new.data - x) ** 2).sum(axis=1)
        improved = (pred != y) & (dist < best_dist)
        best[improved] = x_new.data[improved]
        best_dist[improved] = dist[improved]
        success |= improved
        history.append(best_dist.copy())
        adam_step(params, grads, state)
    final = np.clip((np.tanh(params["w"]) + 1.0) * (0.5 * (hi - lo)) + lo, lo, hi)
    out = np.where(success[:, None], best, final)
    return CWResult(out, success, np.where(success, best_dist, 0.0), history)


# --------------------------------------------------------------------------
# SPSA


def spsa_gradient(loss_fn, x, delta, samples, rng):
    """Rademacher two-sided estimate of the gradient of scalar ``loss_fn`` at ``x`` (1-D)."""
    x = np.asarray(x, dtype=np.float64)
    v = rng.rademacher((samples, x.size))
    lp = loss_fn(x[None, :] + delta * v)
    lm = loss_fn(x[None, :] - delta * v)
    return (((lp - lm) / (2.0 * delta))[:, None] * v).mean(axis=0)


def spsa(model, x, y, config, rng, batch_size=1000):
    """Score-based attack: SPSA gradient estimates of the margin loss and Adam descent."""
    x = np.asarray(x, dtype=np.float64)
    y = _labels(y)
    out = x.copy()
    for i in range(x.shape[0]):
        r = rng.substream(i)
        label = y[i]

        def loss_fn(points, r=r, label=label):
            vals = []
            for s in range(0, points.shape[0], batch_size):
                chunk = points[s : s + batch_size]
                logits = model.class_logits(chunk, K=config.K, rng=r)
                vals.append(margin_loss(logits, np.full(chunk.shape[0], label)).data)
            return np.concatenate(vals)

        params = {"x": x[i].copy()}
        state = AdamState(learning_rate=config.spsa_learning_rate)
        for _ in range(config.spsa_iterations):
            if loss_fn(params["x"][None, :])[0] < config.spsa_stop:
                break
            g = spsa_gradient(loss_fn, params["x"], config.spsa_delta, config.spsa_samples, r)
            adam_step(params, {"x": g}, state)
            params["x"] = project(params["x"], x[i], config.eps, config.box)
        out[i] = params["x"]
    return out


# --------------------------------------------------------------------------
# detection-aware PGD with frozen samples


def detector_statistic(kind, logits, calib):
    """Differentiable detector statistic and matching per-input threshold."""
    logits = ad.as_tensor(logits)
    N = logits.shape[0]
    if kind not in calib.available:
        raise DensityUnavailableError(f"{kind} statistic unavailable for this model")
    if kind == "marginal":
        phi = -ad.logsumexp(logits, axis=1)
        return phi, np.full(N, calib.marginal_threshold)
    cls = np.argmax(logits.data, axis=1)
    onehot = np.eye(logits.shape[1])[cls]
    if kind == "logit":
        return -(logits * onehot).sum(axis=1), calib.logit_threshold[cls]
    ref = calib.class_mean_probs[cls]
    if kind == "KL":
        logq = ad.log_softmax(logits)
        floor = math.log(POSTERIOR_FLOOR)
        logq = ad.where(logq.data > floor, logq, floor)
        safe = np.where(ref > 0.0, ref, 1.0)
        phi = (ref * (np.where(ref > 0.0, np.log(safe), 0.0) - logq * (ref > 0.0))).sum(axis=1)
        return phi, calib.divergence_threshold["KL"][cls]
    if kind == "TV":
        post = ad.softmax(logits)
        return 0.5 * ad.abs_(post - ref).sum(axis=1), calib.divergence_threshold["TV"][cls]
    raise ValueError(f"unknown detector {kind!r}")


def wbs_objective(model, calib, x, y, noise, lambda_detect, detector):
    """``sum_k log p_k(y | x) + lambda * sum_n max(0, phi - delta)`` on frozen samples."""
    lw = model.sample_log_weights(x, noise)
    K, N, C = lw.shape
    onehot = np.eye(C)[_labels(y)]
    per_sample = (ad.log_softmax(lw, axis=2) * onehot[None, :, :]).sum()
    if lambda_detect == 0:
        return per_sample
    logits = ad.logsumexp(lw, axis=0) - math.log(K)
    phi, thr = detector_statistic(detector, logits, calib)
    return per_sample + lambda_detect * ad.relu(phi - thr).sum()


def wbs_detection_aware(model, calib, x, y, config, rng, noise=None, on_step=None):
    """PGD descent of the frozen-sample objective inside the eps-ball."""
    x = np.asarray(x, dtype=np.float64)
    eps, box = config.eps, config.box
    if config.lambda_detect and calib is not None:
        if config.detector not in calib.available:
            raise DensityUnavailableError(f"{config.detector} statistic unavailable for this model")
    if noise is None:
        noise = model.draw_noise(x.shape[0], config.K, rng)
    if eps == 0:
        return x.copy()
    x_adv = x.copy()
    if config.random_start:
        x_adv = project(x + eps * (2.0 * rng.uniform(x.shape) - 1.0), x, eps, box)
    for it in range(config.iterations):
        with GradientTape() as tape:
            xt = tape.watch(x_adv, "x")
            obj = wbs_objective(model, calib, xt, y, noise, config.lambda_detect, config.detector)
        g = tape.backward(obj)["x"]
        x_adv = project(x_adv - config.step_size * np.sign(g), x, eps, box)
        if on_step is not None:
            on_step(it, x_adv)
    return x_adv


def run_attack(model, x, y, config, rng, calib=None):
    """Dispatch on ``config.kind``."""
    kind = config.kind.lower()
    if kind == "fgsm":
        return fgsm(model, x, y, config.eps, config.K, rng, config.box)
    if kind == "pgd":
        return pgd(model, x, y, config, rng)
    if kind == "mim":
        return mim(model, x, y, config, rng)
    if kind == "cw":
        return cw_l2(model, x, y, config.c, config, rng).x_adv
    if kind == "spsa":
        return spsa(model, x, y, config, rng)
    if kind in ("wbs", "wbs+m", "wbs+l", "wbs+k"):
        return wbs_detection_aware(model, calib, x, y, config, rng)
    raise ValueError(f"unknown attack kind {config.kind!r}")
