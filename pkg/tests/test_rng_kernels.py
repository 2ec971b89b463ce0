import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbayes import kernels
from deepbayes.rng import RngStream, splitmix64

# xoshiro256** from state {1, 2, 3, 4}, reference implementation output
XOSHIRO_REF = [11520, 0, 1509978240, 1215971899390074240]


def _backends():
    out = [("numpy", kernels.NUMPY_KERNELS)]
    if kernels.NUMBA_KERNELS:
        out.append(("numba", kernels.NUMBA_KERNELS))
    return out


@pytest.mark.parametrize("name,table", _backends())
def test_xoshiro_reference_vector(name, table):
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    out = np.empty(4, dtype=np.uint64)
    table["xoshiro_fill"](state, out)
    assert [int(v) for v in out] == XOSHIRO_REF


def test_splitmix64_reference():
    # first output of splitmix64 seeded with 0
    _, out = splitmix64(0)
    assert out == 0xE220A8397B1DCDAF


def test_same_seed_same_stream():
    a, b = RngStream(7), RngStream(7)
    assert np.array_equal(a.uniform(100), b.uniform(100))
    assert np.array_equal(a.normal((3, 5)), b.normal((3, 5)))


def test_substreams_differ():
    r = RngStream(7)
    assert not np.array_equal(r.substream(1).uniform(10), r.substream(2).uniform(10))
    assert not np.array_equal(RngStream(7, 1).uniform(10), RngStream(7, 2).uniform(10))


def test_normal_moments():
    x = RngStream(3).normal(200_000)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01


def test_rademacher_values():
    v = RngStream(3).rademacher(10_000)
    assert set(np.unique(v)) == {-1.0, 1.0}
    assert abs(v.mean()) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 60))
def test_permutation_is_permutation(seed, n):
    p = RngStream(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_uniform_in_unit_interval(seed):
    u = RngStream(seed).uniform(1000)
    assert (u >= 0).all() and (u < 1).all()


def test_state_advances():
    r = RngStream(1)
    s0 = r.state()
    r.uniform(1)
    assert r.state() != s0


@pytest.mark.skipif(not kernels.NUMBA_KERNELS, reason="numba not installed")
def test_backends_agree():
    g = np.random.default_rng(0)
    a = g.normal(size=(50, 7)) * 30
    py, nb = kernels.NUMPY_KERNELS, kernels.NUMBA_KERNELS
    assert np.allclose(py["logsumexp_rows"](a), nb["logsumexp_rows"](a), rtol=1e-13)
    x, m, lv = g.normal(size=(3, 50, 7))
    assert np.allclose(py["gauss_logpdf_rows"](x, m, lv, 1e-8), nb["gauss_logpdf_rows"](x, m, lv, 1e-8), rtol=1e-13)
    pts = g.normal(size=(50, 2))
    c = np.array([0.3, -0.2])
    assert np.allclose(py["ring_project"](pts, c, 1.5), nb["ring_project"](pts, c, 1.5), rtol=1e-13)
    p = g.dirichlet(np.ones(4), size=50)
    q = g.dirichlet(np.ones(4), size=50)
    assert np.allclose(py["kl_rows"](p, q, 1e-12), nb["kl_rows"](p, q, 1e-12), rtol=1e-12)
    assert np.allclose(py["tv_rows"](p, q), nb["tv_rows"](p, q), rtol=1e-12)
    s1 = np.array([5, 6, 7, 8], dtype=np.uint64)
    s2 = s1.copy()
    o1 = np.empty(1000, dtype=np.uint64)
    o2 = np.empty(1000, dtype=np.uint64)
    py["xoshiro_fill"](s1, o1)
    nb["xoshiro_fill"](s2, o2)
    assert np.array_equal(o1, o2) and np.array_equal(s1, s2)


def test_logsumexp_rows_stable():
    out = kernels.logsumexp_rows(np.array([[1000.0, 1000.0], [-np.inf, 0.0]]))
    assert out[0] == pytest.approx(1000.0 + math.log(2))
    assert out[1] == pytest.approx(0.0)


def test_ring_project_degenerate_center():
    p = kernels.ring_project(np.array([[0.0, 0.0]]), np.array([0.0, 0.0]), 2.0)
    assert np.allclose(p, [[2.0, 0.0]])


def test_kl_tv_examples():
    ref = np.array([[0.5, 0.5]])
    post = np.array([[0.9, 0.1]])
    assert kernels.kl_rows(ref, post)[0] == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1))
    assert kernels.tv_rows(ref, post)[0] == pytest.approx(0.4)
    assert kernels.kl_rows(ref, ref)[0] == pytest.approx(0.0, abs=1e-15)
