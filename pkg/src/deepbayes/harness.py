"""Experiment orchestration: batches, metrics, transfer and CSV reports."""
import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .bnn import MlpClassifier, MlpConfig, bnn_config, train_classifier
from .bundle import read_bundle, write_bundle
from .detection import DetectorCalibration, batched_logits, detect_all
from .models import DeepBayesModel, ModelConfig, build_model, predict, train
from .rng import RngStream

log = logging.getLogger(__name__)

NA = "N/A"
EVAL_STREAM = 0xE7A1


def cell_stream(seed, *parts):
    """Seed stream for a named cell; independent of scheduling order."""
    key = "/".join(str(p) for p in parts).encode()
    return RngStream(seed, int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little"))


# --------------------------------------------------------------------------
# adversarial batches


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    labels: np.ndarray
    settings: list  # eps (or c) values, one per crafted array
    crafted: list
    predicted: list = field(default_factory=list)
    success: list = field(default_factory=list)
    statistics: list = field(default_factory=list)  # per setting: {detector: array}
    source_model: str = ""
    attack: dict = field(default_factory=dict)
    seed: int = 0

    def save(self, stem):
        arrays = {"clean": self.clean, "labels": self.labels.astype(np.float64)}
        for i, x in enumerate(self.crafted):
            arrays[f"crafted.{i}"] = x
            if self.predicted:
                arrays[f"predicted.{i}"] = self.predicted[i].astype(np.float64)
                arrays[f"success.{i}"] = self.success[i].astype(np.float64)
            for k, v in (self.statistics[i] if self.statistics else {}).items():
                arrays[f"stat.{i}.{k}"] = v
        meta = {
            "kind": "adversarial_batch",
            "settings": [float(s) for s in self.settings],
            "source_model": self.source_model,
            "attack": self.attack,
            "seed": self.seed,
        }
        return write_bundle(stem, meta, arrays)

    @classmethod
    def load(cls, stem):
        manifest, arrays = read_bundle(stem)
        n = len(manifest["settings"])
        crafted = [arrays[f"crafted.{i}"] for i in range(n)]
        predicted = [arrays[f"predicted.{i}"].astype(np.int64) for i in range(n) if f"predicted.{i}" in arrays]
        success = [arrays[f"success.{i}"].astype(bool) for i in range(n) if f"success.{i}" in arrays]
        stats = []
        for i in range(n):
            prefix = f"stat.{i}."
            stats.append({k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)})
        return cls(
            arrays["clean"],
            arrays["labels"].astype(np.int64),
            manifest["settings"],
            crafted,
            predicted,
            success,
            stats,
            manifest["source_model"],
            manifest["attack"],
            manifest["seed"],
        )

    def invariant_violations(self, eps_bound=True):
        """Rows outside the box or (for l-inf attacks) outside the eps-ball."""
        bad = []
        box = tuple(self.attack.get("box", (0.0, 1.0)))
        linf = self.attack.get("kind", "").lower() in ("fgsm", "pgd", "mim", "spsa", "wbs")
        for s, x in zip(self.settings, self.crafted):
            out_box = (x < box[0]).any(axis=1) | (x > box[1]).any(axis=1)
            if linf and eps_bound:
                out_box |= np.abs(x - self.clean).max(axis=1) > s + 1e-9
            bad.append(np.flatnonzero(out_box))
        return bad


def craft_batch(model, x, y, attack_cfg, settings, seed, source_name="", calib=None):
    """Run one attack at every setting (eps, or c for CW); each setting gets its own stream."""
    crafted = []
    for i, s in enumerate(settings):
        cfg = atk.AttackConfig(**{**attack_cfg.to_dict(), "eps" if attack_cfg.kind != "cw" else "c": float(s)})
        rng = cell_stream(seed, source_name, attack_cfg.kind, i)
        crafted.append(atk.run_attack(model, x, y, cfg, rng, calib=calib))
    return AdversarialBatch(
        np.asarray(x, dtype=np.float64),
        np.asarray(y, dtype=np.int64),
        [float(s) for s in settings],
        crafted,
        source_model=source_name,
        attack=attack_cfg.to_dict(),
        seed=seed,
    )


def score_batch(model, calib, batch, K):
    """Predictions, success flags and detector statistics of ``model`` on every crafted set.

    The evaluation stream depends only on the batch seed and setting index,
    so evaluating the source model again reproduces the same predictions.
    """
    preds, succ, stats = [], [], []
    for i, x in enumerate(batch.crafted):
        rng = cell_stream(batch.seed, "eval", i)
        logits = batched_logits(model, x, K, rng)
        pred, _ = predict(logits)
        preds.append(pred)
        succ.append(pred != batch.labels)
        if calib is not None:
            st = {}
            for k, d in detect_all(calib, logits).items():
                st[f"{k}.phi"] = d.statistic
                st[f"{k}.rejected"] = d.rejected.astype(np.float64)
            stats.append(st)
        else:
            stats.append({})
    return preds, succ, stats


# --------------------------------------------------------------------------
# metrics


def rate(num, den):
    return NA if den == 0 else num / den


def attack_metrics(labels, predicted, rejected):
    """Victim accuracy, success rate and per-detector TP rate on successful attacks.

    ``rejected`` maps detector name to a boolean array over inputs.
    """
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    success = predicted != labels
    n = labels.size
    out = {"victim_accuracy": float((~success).sum() / n), "success_rate": float(success.sum() / n)}
    ns = int(success.sum())
    for kind, rej in rejected.items():
        rej = np.asarray(rej, dtype=bool)
        out[f"tp_{kind}"] = rate(int((rej & success).sum()), ns)
    return out


def min_perturbation(success, grid):
    """Smallest grid value with a success per input (``max + 0.1`` if none); returns (per-input, mean)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty perturbation grid")
    success = np.asarray(success, dtype=bool).reshape(grid.size, -1)
    fallback = grid.max() + 0.1
    per_input = np.full(success.shape[1], fallback)
    order = np.argsort(grid)
    for j in order[::-1]:
        per_input = np.where(success[j], grid[j], per_input)
    return per_input, float(per_input.mean())


def _rejections(stats):
    return {k[: -len(".rejected")]: v > 0 for k, v in stats.items() if k.endswith(".rejected")}


def evaluate_batch(model, calib, batch, K, model_name=None, attack_name=None):
    """Report rows for a batch against the model that crafted it."""
    preds, succ, stats = score_batch(model, calib, batch, K)
    batch.predicted, batch.success, batch.statistics = preds, succ, stats
    rows = []
    name = model_name or batch.source_model
    attack_name = attack_name or batch.attack.get("kind", "")
    for s, pred, st in zip(batch.settings, preds, stats):
        m = attack_metrics(batch.labels, pred, _rejections(st))
        rows += [(name, attack_name, s, k, v) for k, v in m.items()]
    if batch.attack.get("kind") != "cw":
        _, mean = min_perturbation(np.array(succ), batch.settings)
        rows.append((name, attack_name, "all", "min_perturbation_mean", mean))
    return rows


def transfer_eval(batch, target, target_calib, K, target_name="target"):
    """Re-evaluate source-successful crafted inputs on ``target``."""
    if batch.clean.shape[1] != target.input_dim:
        raise ValueError(f"dimension mismatch: batch has {batch.clean.shape[1]} features, target expects {target.input_dim}")
    if not batch.success:
        raise ValueError("batch has no source evaluation; score it on the source model first")
    preds, _, stats = score_batch(target, target_calib, batch, K)
    rows = []
    for i, s in enumerate(batch.settings):
        keep = batch.success[i]
        if not keep.any():
            rows.append((batch.source_model, target_name, s, "victim_accuracy", NA))
            for kind in _rejections(stats[i]):
                rows.append((batch.source_model, target_name, s, f"tp_{kind}", NA))
            continue
        rej = {k: v[keep] for k, v in _rejections(stats[i]).items()}
        m = attack_metrics(batch.labels[keep], preds[i][keep], rej)
        rows += [(batch.source_model, target_name, s, k, v) for k, v in m.items() if k != "success_rate"]
        rows.append((batch.source_model, target_name, s, "transferred", int(keep.sum())))
    return rows


def fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return NA
    return repr(round(v, 12))


def write_rows(path, header, rows):
    """Deterministic CSV (LF line endings, fixed float formatting)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# model construction from config entries


def build_from_entry(entry, input_dim, class_count, rng, defaults=None):
    """A fresh LVM or BNN from a config entry (``kind`` "lvm" by default)."""
    defaults = defaults or {}
    kind = entry.get("kind", "lvm")
    if kind == "bnn":
        base = tuple(entry.get("base_hidden", defaults.get("hidden", (128, 128))))
        cfg = bnn_config(
            input_dim, class_count, base, entry.get("width_multiplier", 2), entry.get("dropout", 0.3),
            entry.get("K", defaults.get("K", 10)),
        )
        return MlpClassifier.build(cfg, rng)
    cfg = ModelConfig(
        factorization=entry["factorization"],
        input_dim=input_dim,
        class_count=class_count,
        latent_dim=entry.get("latent_dim", defaults.get("latent_dim", 2)),
        hidden=tuple(entry.get("hidden", defaults.get("hidden", (128, 128)))),
        obs_var=entry.get("obs_var", defaults.get("obs_var", 1.0)),
        K=entry.get("K", defaults.get("K", 10)),
    )
    return build_model(cfg, rng)


def fit(model, x, labels, training, rng):
    epochs = training.get("epochs", 100)
    bs = training.get("batch_size", 100)
    lr = training.get("learning_rate", 1e-3)
    if isinstance(model, MlpClassifier):
        trace, _ = train_classifier(model, x, labels, epochs, rng, bs, lr)
        return [-v for v in trace]
    _, trace = train(model, x, labels, epochs, rng, bs, lr)
    return trace


def save_model(stem, model, name, seed, calib=None):
    if isinstance(model, MlpClassifier):
        meta = {"kind": "bnn", "name": name, "config": model.config.to_dict(), "seed": seed}
        arrays = dict(model.params)
    else:
        meta = {
            "kind": "lvm",
            "name": name,
            "factorization": model.factorization,
            "config": model.config.to_dict(),
            "seed": seed,
        }
        arrays = {**model.params, "log_prior": model.log_prior}
    if calib is not None:
        meta["calibration"] = calib.to_dict()
    return write_bundle(stem, meta, arrays)


def load_model(stem):
    """Return ``(model, calibration or None, manifest)``."""
    manifest, arrays = read_bundle(stem)
    if manifest.get("kind") == "bnn":
        model = MlpClassifier(MlpConfig(**manifest["config"]), arrays)
    elif manifest.get("kind") == "lvm":
        log_prior = arrays.pop("log_prior")
        model = DeepBayesModel(ModelConfig(**manifest["config"]), arrays, log_prior, manifest.get("seed", 0))
    else:
        raise ValueError(f"{stem}: not a model checkpoint")
    calib = manifest.get("calibration")
    return model, (DetectorCalibration.from_dict(calib) if calib else None), manifest
