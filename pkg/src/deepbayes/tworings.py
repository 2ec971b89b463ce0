"""The analytic two-rings generative classifier.

Class ``y`` places its mass on a circle of radius ``r_y`` around ``c_y``
with isotropic Gaussian noise. The class-conditional density at ``x`` is a
Gaussian centred on the nearest point of the circle.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels


@dataclass(frozen=True)
class TwoRingsSpec:
    centers: tuple = ((0.0, 0.0), (0.0, 0.0))
    radii: tuple = (1.0, 2.0)
    noise_var: float = 0.01

    def __post_init__(self):
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be strictly positive")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        if len(self.centers) != len(self.radii):
            raise ValueError("need one center per radius")

    @property
    def sigma(self):
        return math.sqrt(self.noise_var)

    @property
    def num_classes(self):
        return len(self.radii)

    def affine(self, lo, hi):
        """The same rings after mapping the box ``[lo, hi]^2`` onto ``[0, 1]^2``."""
        s = 1.0 / (hi - lo)
        centers = tuple(tuple((c - lo) * s for c in cy) for cy in self.centers)
        return TwoRingsSpec(centers, tuple(r * s for r in self.radii), self.noise_var * s * s)

    def to_dict(self):
        return {"centers": [list(c) for c in self.centers], "radii": list(self.radii), "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(c) for c in d["centers"]), tuple(d["radii"]), float(d["noise_var"]))


def ring_projection(spec, x, cls):
    """Nearest point on ring ``cls`` for each row of ``x``."""
    return kernels.ring_project(np.atleast_2d(x), spec.centers[cls], spec.radii[cls])


def two_rings_logits(spec, x):
    """``log N(x; mu_c, sigma^2 I) + log 0.5`` for each class, shape ``(N, C)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    C = spec.num_classes
    lv = np.full_like(x, math.log(spec.noise_var))
    out = np.empty((x.shape[0], C))
    for c in range(C):
        mu = ring_projection(spec, x, c)
        out[:, c] = kernels.gauss_logpdf_rows(x, mu, lv, ad.VAR_FLOOR) - math.log(C)
    return out


def ring_distance(spec, x, cls):
    x = np.atleast_2d(x)
    return np.abs(np.linalg.norm(x - np.asarray(spec.centers[cls]), axis=1) - spec.radii[cls])


class TwoRingsClassifier:
    """Differentiable wrapper exposing the common classifier interface."""

    has_density = True
    factorization = "TWO_RINGS"

    def __init__(self, spec):
        self.spec = spec

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def input_dim(self):
        return 2

    def draw_noise(self, n, K, rng):
        return np.zeros((1, n, 0))

    def sample_log_weights(self, x, noise=None, params=None):
        x = ad.as_tensor(x)
        N = x.shape[0]
        C = self.num_classes
        log_var = np.full((1, 2), math.log(self.spec.noise_var))
        cols = []
        for c in range(C):
            center = np.asarray(self.spec.centers[c], dtype=np.float64)
            d = x - center
            n = ad.l2_norm(d, axis=1).reshape(N, 1)
            ok = n.data > 0.0
            n_safe = ad.where(ok, n, 1.0)
            u = ad.where(np.broadcast_to(ok, (N, 2)), d / n_safe, np.array([[1.0, 0.0]]))
            mu = center + self.spec.radii[c] * u
            cols.append((ad.gaussian_log_density(x, mu, log_var) - math.log(C)).reshape(N, 1))
        return ad.concat(cols, axis=1).reshape(1, N, C)

    def class_logits(self, x, K=None, rng=None, noise=None, params=None):
        return self.sample_log_weights(x).reshape(ad.as_tensor(x).shape[0], self.num_classes)
