"""Marginal, logit and divergence (KL / TV) detectors.

Every detector computes a statistic ``phi`` per input and accepts iff
``phi <= threshold``. Thresholds come from training-set statistics, either
``mean + alpha * std`` or the empirical quantile that rejects a target
fraction of the training points.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .models import DensityUnavailableError, marginal_log_density, predict

DIVERGENCES = ("KL", "TV")
DETECTORS = ("marginal", "logit", "KL", "TV")
POSTERIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class CalibrationMode:
    kind: str  # "alpha" or "target_fpr"
    value: float

    def __post_init__(self):
        if self.kind not in ("alpha", "target_fpr"):
            raise ValueError(f"unknown calibration mode {self.kind!r}")
        if self.kind == "target_fpr" and not 0.0 <= self.value < 1.0:
            raise ValueError("target false-positive rate must lie in [0, 1)")

    @classmethod
    def alpha(cls, a):
        return cls("alpha", float(a))

    @classmethod
    def target_fpr(cls, rate):
        return cls("target_fpr", float(rate))


def rejected_count(rate, n):
    """Number of training points a target rate rejects: ``ceil(rate * n)``."""
    return min(n, math.ceil(rate * n - 1e-9))


def threshold_from_statistics(values, mode):
    """Threshold for statistics ``values`` under ``mode``; returns ``(mean, std, threshold)``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, math.inf
    mu = float(v.mean())
    sd = float(v.std())
    if mode.kind == "alpha":
        return mu, sd, mu + mode.value * sd
    m = rejected_count(mode.value, v.size)
    s = np.sort(v)
    if m == 0:
        thr = float(s[-1])
    elif m == v.size:
        thr = -math.inf
    else:
        thr = float(s[v.size - m - 1])
    return mu, sd, thr


@dataclass
class DetectorCalibration:
    mode: CalibrationMode
    num_classes: int
    marginal_mean: float = math.nan
    marginal_std: float = math.nan
    marginal_threshold: float = math.nan
    logit_mean: np.ndarray = None
    logit_std: np.ndarray = None
    logit_threshold: np.ndarray = None
    class_mean_probs: np.ndarray = None
    divergence_mean: dict = field(default_factory=dict)
    divergence_std: dict = field(default_factory=dict)
    divergence_threshold: dict = field(default_factory=dict)
    available: tuple = DETECTORS
    K: int = 10

    def threshold(self, kind):
        if kind not in self.available:
            raise DensityUnavailableError(f"{kind} detection unavailable for this model")
        if kind == "marginal":
            return self.marginal_threshold
        if kind == "logit":
            return self.logit_threshold
        return self.divergence_threshold[kind]

    def to_dict(self):
        def arr(a):
            return None if a is None else [_num(v) for v in np.asarray(a).ravel()]

        return {
            "mode": {"kind": self.mode.kind, "value": self.mode.value},
            "num_classes": self.num_classes,
            "K": self.K,
            "available": list(self.available),
            "marginal": {
                "mean": _num(self.marginal_mean),
                "std": _num(self.marginal_std),
                "threshold": _num(self.marginal_threshold),
            },
            "logit": {"mean": arr(self.logit_mean), "std": arr(self.logit_std), "threshold": arr(self.logit_threshold)},
            "class_mean_probs": None
            if self.class_mean_probs is None
            else [arr(row) for row in self.class_mean_probs],
            "divergence": {
                k: {
                    "mean": arr(self.divergence_mean[k]),
                    "std": arr(self.divergence_std[k]),
                    "threshold": arr(self.divergence_threshold[k]),
                }
                for k in self.divergence_threshold
            },
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.array([_unnum(v) for v in a], dtype=np.float64)

        mode = CalibrationMode(d["mode"]["kind"], d["mode"]["value"])
        div = d.get("divergence", {})
        probs = d.get("class_mean_probs")
        return cls(
            mode=mode,
            num_classes=d["num_classes"],
            marginal_mean=_unnum(d["marginal"]["mean"]),
            marginal_std=_unnum(d["marginal"]["std"]),
            marginal_threshold=_unnum(d["marginal"]["threshold"]),
            logit_mean=arr(d["logit"]["mean"]),
            logit_std=arr(d["logit"]["std"]),
            logit_threshold=arr(d["logit"]["threshold"]),
            class_mean_probs=None if probs is None else np.array([arr(r) for r in probs]),
            divergence_mean={k: arr(v["mean"]) for k, v in div.items()},
            divergence_std={k: arr(v["std"]) for k, v in div.items()},
            divergence_threshold={k: arr(v["threshold"]) for k, v in div.items()},
            available=tuple(d["available"]),
            K=d.get("K", 10),
        )


def _num(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _unnum(v):
    return float(v) if v is not None else math.nan


@dataclass
class DetectionDecision:
    kind: str
    statistic: np.ndarray
    threshold: np.ndarray
    accepted: np.ndarray

    @property
    def rejected(self):
        return ~self.accepted


def divergence(kind, ref, post):
    """Row-wise ``D[ref || post]``; KL floors ``post`` at 1e-12 and uses 0 log 0 = 0."""
    if kind == "KL":
        return kernels.kl_rows(ref, post, POSTERIOR_FLOOR)
    if kind == "TV":
        return kernels.tv_rows(ref, post)
    raise ValueError(f"unknown divergence {kind!r}")


def batched_logits(model, x, K, rng, batch_size=500):
    """Class logits for many inputs, one RNG substream per batch."""
    out = []
    for i, start in enumerate(range(0, x.shape[0], batch_size)):
        xb = x[start : start + batch_size]
        out.append(model.class_logits(xb, K=K, rng=rng.substream(i)).data)
    return np.concatenate(out, axis=0)


def calibrate_from_logits(logits, labels, mode, has_density=True, K=10):
    """Fit every detector's statistics on training logits with true ``labels``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[1]
    _, post = predict(logits)
    cal = DetectorCalibration(mode=mode, num_classes=C, K=K)
    available = []
    if has_density:
        phi = -marginal_log_density(logits)
        cal.marginal_mean, cal.marginal_std, cal.marginal_threshold = threshold_from_statistics(phi, mode)
        stats = [threshold_from_statistics(-logits[labels == c, c], mode) for c in range(C)]
        cal.logit_mean, cal.logit_std, cal.logit_threshold = (np.array(s) for s in zip(*stats))
        available += ["marginal", "logit"]
    probs = np.zeros((C, C))
    for c in range(C):
        rows = post[labels == c]
        probs[c] = rows.mean(axis=0) if len(rows) else np.full(C, 1.0 / C)
    cal.class_mean_probs = probs
    for kind in DIVERGENCES:
        stats = []
        for c in range(C):
            rows = post[labels == c]
            stats.append(threshold_from_statistics(divergence(kind, probs[c][None, :], rows), mode))
        m, s, t = (np.array(v) for v in zip(*stats))
        cal.divergence_mean[kind], cal.divergence_std[kind], cal.divergence_threshold[kind] = m, s, t
        available.append(kind)
    cal.available = tuple(available)
    return cal


def calibrate(model, x, labels, mode, K=10, rng=None):
    """Calibrate all detectors the model supports on training data ``(x, labels)``."""
    logits = batched_logits(model, np.asarray(x, dtype=np.float64), K, rng)
    return calibrate_from_logits(logits, labels, mode, has_density=model.has_density, K=K)


def decide(calib, kind, logits, labels=None):
    """Detector decision from precomputed logits.

    ``labels`` overrides the predicted class for logit/divergence detectors
    (used to evaluate a pair ``(x, y)`` with a manually assigned ``y``).
    """
    logits = np.asarray(logits, dtype=np.float64)
    thr = calib.threshold(kind)
    pred, post = predict(logits)
    cls = pred if labels is None else np.asarray(labels, dtype=np.int64)
    if kind == "marginal":
        phi = -marginal_log_density(logits)
        t = np.full(phi.shape, thr)
    elif kind == "logit":
        phi = -logits[np.arange(len(cls)), cls]
        t = thr[cls]
    else:
        phi = divergence(kind, calib.class_mean_probs[cls], post)
        t = thr[cls]
    return DetectionDecision(kind, phi, t, phi <= t)


def _model_logits(model, x, K, rng, logits):
    if logits is not None:
        return logits
    return model.class_logits(np.atleast_2d(x), K=K, rng=rng).data


def detect_marginal(calib, model, x, K=None, rng=None, logits=None):
    if not model.has_density:
        raise DensityUnavailableError("marginal detection needs a density over inputs")
    return decide(calib, "marginal", _model_logits(model, x, K or calib.K, rng, logits))


def detect_logit(calib, model, x, K=None, rng=None, logits=None, labels=None):
    if not model.has_density:
        raise DensityUnavailableError("logit detection needs a density over inputs")
    return decide(calib, "logit", _model_logits(model, x, K or calib.K, rng, logits), labels)


def detect_divergence(calib, model, x, kind="KL", K=None, rng=None, logits=None):
    return decide(calib, kind, _model_logits(model, x, K or calib.K, rng, logits))


def detect_all(calib, logits):
    """``{kind: DetectionDecision}`` for every available detector."""
    return {kind: decide(calib, kind, logits) for kind in calib.available}


def combined_rejection(decisions):
    out = None
    for d in decisions.values():
        out = d.rejected if out is None else (out | d.rejected)
    return out
