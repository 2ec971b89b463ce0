"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: a loop form compiled by numba and a vectorised
numpy form. ``USE_NUMBA`` (see ``_accel``) picks which one the public names
bind to. Both forms are kept importable as ``NUMBA_KERNELS`` and
``NUMPY_KERNELS`` so the benchmark and the tests can compare them directly.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

_MASK64 = (1 << 64) - 1
LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# xoshiro256**


def _xoshiro_fill_py(state, out):
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(out.shape[0]):
        x = (s1 * 5) & _MASK64
        x = ((x << 7) | (x >> 57)) & _MASK64
        out[i] = (x * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


def _xoshiro_fill_loop(state, out):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    five = np.uint64(5)
    nine = np.uint64(9)
    k7 = np.uint64(7)
    k57 = np.uint64(57)
    k17 = np.uint64(17)
    k45 = np.uint64(45)
    k19 = np.uint64(19)
    for i in range(out.shape[0]):
        x = s1 * five
        x = (x << k7) | (x >> k57)
        out[i] = x * nine
        t = s1 << k17
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << k45) | (s3 >> k19)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


# --------------------------------------------------------------------------
# row-wise log-sum-exp


def _logsumexp_rows_np(a):
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _logsumexp_rows_loop(a):
    n, c = a.shape
    out = np.empty(n)
    for i in range(n):
        m = a[i, 0]
        for j in range(1, c):
            if a[i, j] > m:
                m = a[i, j]
        s = 0.0
        for j in range(c):
            s += math.exp(a[i, j] - m)
        out[i] = m + math.log(s)
    return out


# --------------------------------------------------------------------------
# diagonal Gaussian log-density, summed over the last axis


def _gauss_logpdf_rows_np(x, mean, log_var, var_floor):
    var = np.maximum(np.exp(log_var), var_floor)
    r = x - mean
    return (-0.5 * LOG_2PI - 0.5 * np.log(var) - r * r / (2.0 * var)).sum(axis=1)


def _gauss_logpdf_rows_loop(x, mean, log_var, var_floor):
    n, d = x.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            v = math.exp(log_var[i, j])
            if v < var_floor:
                v = var_floor
            r = x[i, j] - mean[i, j]
            s += -0.5 * LOG_2PI - 0.5 * math.log(v) - r * r / (2.0 * v)
        out[i] = s
    return out


# --------------------------------------------------------------------------
# nearest point on a circle


def _ring_project_np(x, center, radius):
    d = x - center
    n = np.sqrt((d * d).sum(axis=1))
    u = np.empty_like(d)
    ok = n > 0.0
    u[ok] = d[ok] / n[ok, None]
    u[~ok] = (1.0, 0.0)
    return center + radius * u


def _ring_project_loop(x, center, radius):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        d0 = x[i, 0] - center[0]
        d1 = x[i, 1] - center[1]
        n = math.sqrt(d0 * d0 + d1 * d1)
        if n > 0.0:
            out[i, 0] = center[0] + radius * d0 / n
            out[i, 1] = center[1] + radius * d1 / n
        else:
            out[i, 0] = center[0] + radius
            out[i, 1] = center[1]
    return out


# --------------------------------------------------------------------------
# divergences between a reference distribution per row and a posterior


def _kl_rows_np(ref, post, floor):
    q = np.maximum(post, floor)
    safe = np.where(ref > 0.0, ref, 1.0)
    return np.where(ref > 0.0, ref * (np.log(safe) - np.log(q)), 0.0).sum(axis=1)


def _kl_rows_loop(ref, post, floor):
    n, c = ref.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(c):
            p = ref[i, j]
            if p > 0.0:
                q = post[i, j]
                if q < floor:
                    q = floor
                s += p * (math.log(p) - math.log(q))
        out[i] = s
    return out


def _tv_rows_np(ref, post):
    return 0.5 * np.abs(ref - post).sum(axis=1)


def _tv_rows_loop(ref, post):
    n, c = ref.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(c):
            s += abs(ref[i, j] - post[i, j])
        out[i] = 0.5 * s
    return out


NUMPY_KERNELS = {
    "xoshiro_fill": _xoshiro_fill_py,
    "logsumexp_rows": _logsumexp_rows_np,
    "gauss_logpdf_rows": _gauss_logpdf_rows_np,
    "ring_project": _ring_project_np,
    "kl_rows": _kl_rows_np,
    "tv_rows": _tv_rows_np,
}

if USE_NUMBA:
    NUMBA_KERNELS = {
        "xoshiro_fill": njit(_xoshiro_fill_loop),
        "logsumexp_rows": njit(_logsumexp_rows_loop),
        "gauss_logpdf_rows": njit(_gauss_logpdf_rows_loop),
        "ring_project": njit(_ring_project_loop),
        "kl_rows": njit(_kl_rows_loop),
        "tv_rows": njit(_tv_rows_loop),
    }
    _active = NUMBA_KERNELS
else:
    NUMBA_KERNELS = {}
    _active = NUMPY_KERNELS

BACKEND = "numba" if USE_NUMBA else "numpy"


def xoshiro_fill(state, out):
    """Advance a 4-word xoshiro256** ``state`` in place, writing ``len(out)`` draws."""
    _active["xoshiro_fill"](state, out)


def logsumexp_rows(a):
    return _active["logsumexp_rows"](np.ascontiguousarray(a, dtype=np.float64))


def gauss_logpdf_rows(x, mean, log_var, var_floor):
    x, mean, log_var = np.broadcast_arrays(
        np.asarray(x, np.float64), np.asarray(mean, np.float64), np.asarray(log_var, np.float64)
    )
    return _active["gauss_logpdf_rows"](
        np.ascontiguousarray(x), np.ascontiguousarray(mean), np.ascontiguousarray(log_var), float(var_floor)
    )


def ring_project(x, center, radius):
    return _active["ring_project"](
        np.ascontiguousarray(x, dtype=np.float64), np.asarray(center, dtype=np.float64), float(radius)
    )


def kl_rows(ref, post, floor=1e-12):
    ref, post = np.broadcast_arrays(np.asarray(ref, np.float64), np.asarray(post, np.float64))
    return _active["kl_rows"](np.ascontiguousarray(ref), np.ascontiguousarray(post), float(floor))


def tv_rows(ref, post):
    ref, post = np.broadcast_arrays(np.asarray(ref, np.float64), np.asarray(post, np.float64))
    return _active["tv_rows"](np.ascontiguousarray(ref), np.ascontiguousarray(post))
