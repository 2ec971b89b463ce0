"""Compare the numba and pure-numpy kernel backends.

Two views:

* per-kernel timings, calling both kernel tables in one process;
* an end-to-end workload (training epochs plus importance-sampled logits)
  run in a subprocess per backend, since ``DEEPBAYES_NUMBA`` is read at import.

Usage: ``python benchmarks/bench_kernels.py [--repeat 5] [--skip-e2e]``
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from deepbayes import kernels


def _kernel_cases(g):
    a = g.normal(size=(20_000, 10)) * 5
    x, m, lv = g.normal(size=(3, 20_000, 8))
    pts = g.normal(size=(50_000, 2))
    p = g.dirichlet(np.ones(10), size=20_000)
    q = g.dirichlet(np.ones(10), size=20_000)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    out = np.empty(100_000, dtype=np.uint64)
    return {
        "xoshiro_fill (1e5 draws)": ("xoshiro_fill", (state, out)),
        "logsumexp_rows (2e4 x 10)": ("logsumexp_rows", (a,)),
        "gauss_logpdf_rows (2e4 x 8)": ("gauss_logpdf_rows", (x, m, lv, 1e-8)),
        "ring_project (5e4 pts)": ("ring_project", (pts, np.zeros(2), 1.5)),
        "kl_rows (2e4 x 10)": ("kl_rows", (p, q, 1e-12)),
        "tv_rows (2e4 x 10)": ("tv_rows", (p, q)),
    }


def bench_kernels(repeat):
    if not kernels.NUMBA_KERNELS:
        print("numba unavailable or disabled; per-kernel comparison skipped")
        return
    g = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, (name, args) in _kernel_cases(g).items():
        nb = kernels.NUMBA_KERNELS[name]
        py = kernels.NUMPY_KERNELS[name]
        nb(*args)  # compile outside the timed region
        reps = 1 if name == "xoshiro_fill" else 5
        t_py = min(timeit.repeat(lambda: py(*args), number=reps, repeat=repeat)) / reps
        t_nb = min(timeit.repeat(lambda: nb(*args), number=reps, repeat=repeat)) / reps
        print(f"{label:<30}{t_py * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_py / t_nb:>9.1f}x")


E2E = """
import json, time
from deepbayes import kernels
from deepbayes.data import sample_two_rings
from deepbayes.models import ModelConfig, build_model, train
from deepbayes.rng import RngStream
from deepbayes.tworings import TwoRingsSpec
ds = sample_two_rings(TwoRingsSpec(), 500, RngStream(0))
m = build_model(ModelConfig("GBZ", 2, 2, hidden=(64, 64), obs_var=0.01), RngStream(1))
train(m, ds.inputs[:100], ds.labels[:100], 1, RngStream(9))  # warm-up / compile
t0 = time.perf_counter(); RngStream(3).normal(1_000_000); t_rng = time.perf_counter() - t0
t0 = time.perf_counter(); train(m, ds.inputs, ds.labels, 5, RngStream(2)); t_train = time.perf_counter() - t0
t0 = time.perf_counter(); m.class_logits(ds.inputs, K=100, rng=RngStream(4)); t_logits = time.perf_counter() - t0
print(json.dumps({"backend": kernels.BACKEND, "rng_1e6_normals": t_rng, "train_5_epochs": t_train, "logits_K100": t_logits}))
"""


def bench_end_to_end():
    rows = []
    for flag in ("0", "1"):
        env = {**os.environ, "DEEPBAYES_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(res.stdout.strip().splitlines()[-1]))
    keys = [k for k in rows[0] if k != "backend"]
    print(f"\n{'workload':<30}" + "".join(f"{r['backend'] + ' s':>12}" for r in rows))
    for k in keys:
        print(f"{k:<30}" + "".join(f"{r[k]:>12.3f}" for r in rows))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--skip-e2e", action="store_true")
    args = p.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    if not args.skip_e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()
