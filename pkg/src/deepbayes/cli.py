"""Command-line entry point: ``deepbayes <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (including unknown
subcommands), 3 malformed config, 4 missing input artifact.
"""
import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import data as dat
from . import harness as hx
from .detection import CalibrationMode, batched_logits, calibrate, calibrate_from_logits, decide
from .models import DensityUnavailableError, predict
from .tworings import TwoRingsSpec, two_rings_logits

SCHEMA_VERSION = 1
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3, 4
SUBCOMMANDS = ("train", "calibrate", "attack", "detect", "evaluate", "transfer", "report", "two-rings-demo")

log = logging.getLogger("deepbayes")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# config


def load_config(path):
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingArtifactError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    if "seed" not in cfg:
        raise ConfigError("seed is required (no implicit entropy)")
    ds = cfg.get("dataset")
    if not isinstance(ds, dict) or ds.get("kind") not in ("two_rings", "idx", "features"):
        raise ConfigError("dataset.kind must be one of two_rings, idx, features")
    models = cfg.get("models")
    if not isinstance(models, list) or not models:
        raise ConfigError("models must be a non-empty list")
    names = [m.get("name") for m in models]
    if None in names or len(set(names)) != len(names):
        raise ConfigError("every model needs a unique name")
    for a in cfg.get("attacks", []):
        grid = a.get("eps", a.get("c"))
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"attack {a.get('name')!r} needs a non-empty eps or c list")
        if any(b <= a_ for a_, b in zip(grid, grid[1:])):
            raise ConfigError(f"attack {a.get('name')!r}: grid must be strictly increasing")
    det = cfg.get("detection", {"mode": "target_fpr", "value": 0.05})
    try:
        CalibrationMode(det.get("mode", "target_fpr"), float(det.get("value", 0.05)))
    except (ValueError, TypeError) as err:
        raise ConfigError(f"detection: {err}") from None


def load_datasets(cfg):
    """``(train, eval)`` datasets described by the config."""
    ds = cfg["dataset"]
    seed = cfg["seed"]
    if ds["kind"] == "two_rings":
        spec = TwoRingsSpec.from_dict(ds["spec"]) if "spec" in ds else TwoRingsSpec()
        train = dat.sample_two_rings(spec, ds.get("n_per_class", 1000), hx.cell_stream(seed, "data", "train"))
        test = dat.sample_two_rings(spec, ds.get("n_test_per_class", 100), hx.cell_stream(seed, "data", "test"))
        if "box" in ds:
            lo, hi = ds["box"]
            train, test = dat.normalize_to_box(train, lo, hi), dat.normalize_to_box(test, lo, hi)
    elif ds["kind"] == "idx":
        train = _need(lambda: dat.load_idx(ds["train_images"], ds["train_labels"], ds.get("class_count", 10)))
        test = _need(lambda: dat.load_idx(ds["test_images"], ds["test_labels"], ds.get("class_count", 10)))
    else:
        train = _need(lambda: dat.load_feature_vectors(ds["train"]))
        test = _need(lambda: dat.load_feature_vectors(ds["test"]))
    if "binary" in ds:
        a, b = ds["binary"]
        train, test = dat.subset_binary(train, a, b), dat.subset_binary(test, a, b)
    n_eval = cfg.get("eval_size")
    if n_eval is not None and n_eval < len(test):
        idx = np.sort(hx.cell_stream(seed, "data", "eval").permutation(len(test))[:n_eval])
        test = test.take(idx)
    return train, test


def obs_var_default(cfg):
    ds = cfg["dataset"]
    if ds["kind"] == "two_rings":
        spec = TwoRingsSpec.from_dict(ds["spec"]) if "spec" in ds else TwoRingsSpec()
        if "box" in ds:
            spec = spec.affine(*ds["box"])
        return spec.noise_var
    return 1.0


def _need(fn):
    try:
        return fn()
    except FileNotFoundError as err:
        raise MissingArtifactError(str(err)) from None


def _model_stem(out, name):
    return Path(out) / "models" / name


def _load(out, name):
    stem = _model_stem(out, name)
    if not stem.with_suffix(".json").exists():
        raise MissingArtifactError(f"missing checkpoint {stem}.json (run train first)")
    return hx.load_model(stem)


def _calibration_mode(cfg):
    det = cfg.get("detection", {})
    return CalibrationMode(det.get("mode", "target_fpr"), float(det.get("value", 0.05)))


def _map(jobs, fn, items):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg, out, jobs):
    train, _ = load_datasets(cfg)
    seed = cfg["seed"]
    defaults = {"hidden": cfg.get("hidden", (128, 128)), "K": cfg.get("K", 10), "obs_var": obs_var_default(cfg)}

    def one(entry):
        name = entry["name"]
        model = hx.build_from_entry(entry, train.dim, train.class_count, hx.cell_stream(seed, "init", name), defaults)
        trace = hx.fit(model, train.inputs, train.labels, cfg.get("training", {}), hx.cell_stream(seed, "train", name))
        hx.save_model(_model_stem(out, name), model, name, seed)
        return [(name, i + 1, v) for i, v in enumerate(trace)]

    rows = [r for part in _map(jobs, one, cfg["models"]) for r in part]
    hx.write_rows(Path(out) / "reports" / "train_trace.csv", ["model", "epoch", "objective"], rows)


def cmd_calibrate(cfg, out, jobs):
    train, _ = load_datasets(cfg)
    mode = _calibration_mode(cfg)

    def one(entry):
        name = entry["name"]
        model, _, _ = _load(out, name)
        calib = calibrate(model, train.inputs, train.labels, mode, cfg.get("K", 10), hx.cell_stream(cfg["seed"], "calib", name))
        hx.save_model(_model_stem(out, name), model, name, cfg["seed"], calib)

    _map(jobs, one, cfg["models"])


def _attack_config(entry, cfg):
    fields = dict(entry)
    fields.pop("name", None)
    grid = fields.pop("eps", None) or fields.pop("c", None)
    fields.setdefault("K", cfg.get("K", 10))
    fields.setdefault("seed", cfg["seed"])
    return atk.AttackConfig(**fields), grid


def _batch_stem(out, model_name, attack_name):
    return Path(out) / "batches" / f"{model_name}__{attack_name}"


def cmd_attack(cfg, out, jobs):
    _, test = load_datasets(cfg)
    cells = [(m["name"], a) for m in cfg["models"] for a in cfg.get("attacks", [])]

    def one(cell):
        name, entry = cell
        model, calib, _ = _load(out, name)
        acfg, grid = _attack_config(entry, cfg)
        if acfg.kind.startswith("wbs") and acfg.lambda_detect and calib is None:
            raise MissingArtifactError(f"{name}: detection-aware attack needs a calibration (run calibrate first)")
        try:
            batch = hx.craft_batch(model, test.inputs, test.labels, acfg, grid, cfg["seed"], name, calib)
        except DensityUnavailableError as err:
            log.warning("skipping %s on %s: %s", entry["name"], name, err)
            return
        hx.evaluate_batch(model, calib, batch, cfg.get("K", 10), name, entry["name"])
        batch.save(_batch_stem(out, name, entry["name"]))

    _map(jobs, one, cells)


def _batches(out, cfg):
    for m in cfg["models"]:
        for a in cfg.get("attacks", []):
            stem = _batch_stem(out, m["name"], a["name"])
            if stem.with_suffix(".json").exists():
                yield m["name"], a["name"], stem


def cmd_detect(cfg, out, jobs):
    rows = []
    for name, attack_name, stem in _batches(out, cfg):
        batch = hx.AdversarialBatch.load(stem)
        for i, s in enumerate(batch.settings):
            st = batch.statistics[i] if batch.statistics else {}
            kinds = sorted(k[: -len(".phi")] for k in st if k.endswith(".phi"))
            for n in range(len(batch.labels)):
                for k in kinds:
                    rows.append((name, attack_name, s, n, k, st[f"{k}.phi"][n], int(st[f"{k}.rejected"][n])))
    hx.write_rows(
        Path(out) / "reports" / "detections.csv",
        ["model", "attack", "setting", "input", "detector", "statistic", "rejected"],
        rows,
    )


def _clean_rows(cfg, out, test):
    rows = []
    for m in cfg["models"]:
        model, calib, _ = _load(out, m["name"])
        logits = batched_logits(model, test.inputs, cfg.get("K", 10), hx.cell_stream(cfg["seed"], "clean", m["name"]))
        pred, _ = predict(logits)
        rows.append((m["name"], "clean", "none", "clean_accuracy", float((pred == test.labels).mean())))
        if calib is not None:
            for kind in calib.available:
                fpr = float(decide(calib, kind, logits).rejected.mean())
                rows.append((m["name"], "clean", "none", f"fpr_{kind}", fpr))
    return rows


def cmd_evaluate(cfg, out, jobs):
    _, test = load_datasets(cfg)
    rows = _clean_rows(cfg, out, test)
    for name, attack_name, stem in _batches(out, cfg):
        model, calib, _ = _load(out, name)
        batch = hx.AdversarialBatch.load(stem)
        rows += hx.evaluate_batch(model, calib, batch, cfg.get("K", 10), name, attack_name)
    hx.write_rows(Path(out) / "reports" / "metrics.csv", ["model", "attack", "setting", "metric", "value"], rows)


def cmd_transfer(cfg, out, jobs):
    rows = []
    names = [m["name"] for m in cfg["models"]]
    for source, attack_name, stem in _batches(out, cfg):
        batch = hx.AdversarialBatch.load(stem)
        for target in names:
            model, calib, _ = _load(out, target)
            for r in hx.transfer_eval(batch, model, calib, cfg.get("K", 10), target):
                rows.append((r[0], attack_name, *r[1:]))
    hx.write_rows(
        Path(out) / "reports" / "transfer.csv", ["source", "attack", "target", "setting", "metric", "value"], rows
    )


def cmd_report(cfg, out, jobs):
    """Collapse metrics into a victim-accuracy / TP table and per-attack curves for plotting."""
    path = Path(out) / "reports" / "metrics.csv"
    if not path.exists():
        raise MissingArtifactError(f"{path} missing (run evaluate first)")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    summary = []
    for r in rows:
        if r["metric"] in ("clean_accuracy", "victim_accuracy", "min_perturbation_mean") or r["metric"].startswith("tp_"):
            summary.append((r["model"], r["attack"], r["setting"], r["metric"], r["value"]))
    hx.write_rows(Path(out) / "reports" / "summary.csv", ["model", "attack", "setting", "metric", "value"], summary)
    curves = [(r["model"], r["attack"], r["setting"], r["value"]) for r in rows if r["metric"] == "victim_accuracy"]
    hx.write_rows(Path(out) / "plots" / "accuracy_curves.csv", ["model", "attack", "setting", "victim_accuracy"], curves)


def two_rings_demo(seed, out, grid_size=121, extent=3.0, fpr=0.10, spec=None):
    """Decision and rejection grid for the analytic two-rings classifier."""
    spec = spec or TwoRingsSpec()
    train = dat.sample_two_rings(spec, 1000, hx.cell_stream(seed, "two-rings", "train"))
    calib = calibrate_from_logits(two_rings_logits(spec, train.inputs), train.labels, CalibrationMode.target_fpr(fpr))
    g = np.linspace(-extent, extent, grid_size)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    logits = two_rings_logits(spec, pts)
    pred, _ = predict(logits)
    acc = {k: decide(calib, k, logits).accepted for k in ("marginal", "logit", "KL", "TV")}
    rows = [
        (p[0], p[1], int(c), int(acc["marginal"][i]), int(acc["logit"][i]), int(acc["KL"][i]), int(acc["TV"][i]))
        for i, (p, c) in enumerate(zip(pts, pred))
    ]
    out = Path(out)
    hx.write_rows(
        out / "two_rings_grid.csv",
        ["x1", "x2", "predicted", "accepted_marginal", "accepted_logit", "accepted_kl", "accepted_tv"],
        rows,
    )
    hx.write_rows(out / "two_rings_train.csv", ["x1", "x2", "label"], [(*x, int(y)) for x, y in zip(train.inputs, train.labels)])
    (out / "two_rings_calibration.json").write_text(json.dumps(calib.to_dict(), indent=2, sort_keys=True) + "\n")
    return calib, pts, pred, acc


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def run_pipeline(cfg, out, jobs=1):
    """train -> calibrate -> attack -> evaluate -> transfer -> report."""
    for name in ("train", "calibrate", "attack", "evaluate", "transfer", "report"):
        COMMANDS[name](cfg, out, jobs)


def _parser():
    p = argparse.ArgumentParser(prog="deepbayes", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS + ("pipeline",))
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed (u64)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None):
    level = os.environ.get("DEEPBAYES_LOG", "warn").upper()
    logging.basicConfig(level={"WARN": "WARNING"}.get(level, level), format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "two-rings-demo":
            seed = args.seed if args.seed is not None else 0
            spec = None
            if args.config:
                spec = TwoRingsSpec.from_dict(load_config_raw(args.config).get("spec", TwoRingsSpec().to_dict()))
            two_rings_demo(seed, out, spec=spec)
            return 0
        if not args.config:
            raise ConfigError(f"{args.command} requires --config")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            run_pipeline(cfg, out, args.jobs)
        else:
            COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"error: missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as err:  # noqa: BLE001 - map to a structured exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def load_config_raw(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingArtifactError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None


if __name__ == "__main__":
    sys.exit(main())
