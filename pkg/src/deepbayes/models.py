"""Latent-variable classifiers over seven graphical factorisations.

Each factorisation of ``p(x, z, y)`` is described by the set of conditionals
it owns. All models share an amortised encoder ``q(z | x, y)`` and are
trained by maximising the single-sample variational lower bound. Generative
models classify with the importance-sampled Bayes rule; discriminative
ones average ``p(y | ...)`` over draws of the ``z`` path.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import GradientTape, Tensor
from .optim import AdamState, adam_step

FACTORIZATIONS = ("GFZ", "GFY", "GBZ", "GBY", "DFX", "DFZ", "DBX")
GENERATIVE = frozenset({"GFZ", "GFY", "GBZ", "GBY"})
DISCRIMINATIVE = frozenset({"DFX", "DBX"})
BOTTLENECK = frozenset({"GBZ", "GBY", "DBX"})

# conditionals owned by each factorisation, besides the encoder q(z|x,y)
CONDITIONALS = {
    "GFZ": ("p_z", "p_y_z", "p_x_zy"),
    "GFY": ("p_D_y", "p_z_y", "p_x_zy"),
    "GBZ": ("p_z", "p_y_z", "p_x_z"),
    "GBY": ("p_D_y", "p_z_y", "p_x_z"),
    "DFX": ("p_D_x", "p_z_x", "p_y_zx"),
    "DFZ": ("p_z", "p_x_z", "p_y_zx"),
    "DBX": ("p_D_x", "p_z_x", "p_y_z"),
}
# parameter-free factors
_FIXED = frozenset({"p_z", "p_D_y", "p_D_x"})

log = logging.getLogger(__name__)


class UnknownFactorizationError(ValueError):
    pass


class DensityUnavailableError(ValueError):
    """The model has no density over inputs (discriminative factorisation)."""


class NonFiniteError(FloatingPointError):
    def __init__(self, conditional, detail=""):
        self.conditional = conditional
        super().__init__(f"non-finite value in {conditional}{detail}")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, cause=None):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {cause}")


@dataclass
class ModelConfig:
    factorization: str
    input_dim: int
    class_count: int
    latent_dim: int = 2
    hidden: tuple = (128, 128)
    obs_var: float = 1.0
    K: int = 10

    def __post_init__(self):
        self.factorization = str(self.factorization).upper()
        if self.factorization not in FACTORIZATIONS:
            raise UnknownFactorizationError(f"unknown factorization {self.factorization!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.input_dim < 1 or self.class_count < 1:
            raise ValueError("input_dim and class_count must be >= 1")
        if not self.obs_var >= ad.VAR_FLOOR:
            raise ValueError(f"obs_var must be >= {ad.VAR_FLOOR}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _net_sizes(cfg):
    D, C, Z, H = cfg.input_dim, cfg.class_count, cfg.latent_dim, list(cfg.hidden)
    return {
        "q_z_xy": [D + C, *H, 2 * Z],
        "p_y_z": [Z, *H, C],
        "p_x_zy": [Z + C, *H, D],
        "p_x_z": [Z, *H, D],
        "p_z_y": [C, *H, 2 * Z],
        "p_z_x": [D, *H, 2 * Z],
        "p_y_zx": [Z + D, *H, C],
    }


@dataclass
class DeepBayesModel:
    config: ModelConfig
    params: dict
    log_prior: np.ndarray
    seed: int = 0
    trace: list = field(default_factory=list)

    @property
    def factorization(self):
        return self.config.factorization

    @property
    def conditionals(self):
        return frozenset(CONDITIONALS[self.factorization]) | {"q_z_xy"}

    @property
    def networks(self):
        return tuple(c for c in sorted(self.conditionals) if c not in _FIXED)

    @property
    def num_classes(self):
        return self.config.class_count

    @property
    def input_dim(self):
        return self.config.input_dim

    @property
    def has_density(self):
        return self.factorization not in DISCRIMINATIVE

    @property
    def is_generative(self):
        return self.factorization in GENERATIVE

    def _layers(self, net):
        return len(self.config.hidden) + 1  # every network has the same depth

    def copy(self):
        return DeepBayesModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.log_prior.copy(),
            self.seed,
            list(self.trace),
        )

    # ------------------------------------------------------------------
    # sampling noise shapes

    def noise_shape(self, n, K):
        Z = self.config.latent_dim
        if self.factorization in DISCRIMINATIVE:
            return (K, n, Z)
        return (self.config.class_count, K, n, Z)

    def draw_noise(self, n, K, rng):
        return rng.normal(self.noise_shape(n, K))

    # ------------------------------------------------------------------
    # log-densities of the individual factors

    def _gaussian_head(self, P, name, h):
        out = nn.mlp(P, name, h, self._layers(name))
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError(name)
        return nn.split_gaussian(out, self.config.latent_dim)

    def _encoder(self, P, x, y):
        return self._gaussian_head(P, "q_z_xy", ad.concat([x, y], axis=1))

    def _factor_terms(self, P, x, y, z):
        """Per-row log-density of each owned factor; ``y`` is one-hot."""
        cfg = self.config
        Z = cfg.latent_dim
        log_obs = np.full((1, cfg.input_dim), math.log(cfg.obs_var))
        terms = {}
        for name in CONDITIONALS[self.factorization]:
            if name == "p_z":
                terms[name] = ad.gaussian_log_density(z, np.zeros((1, Z)), np.zeros((1, Z)))
            elif name == "p_D_y":
                terms[name] = Tensor(np.asarray(y) @ self.log_prior)
            elif name == "p_D_x":
                continue
            elif name == "p_z_y":
                m, lv = self._gaussian_head(P, name, y)
                terms[name] = ad.gaussian_log_density(z, m, lv)
            elif name == "p_z_x":
                m, lv = self._gaussian_head(P, name, x)
                terms[name] = ad.gaussian_log_density(z, m, lv)
            elif name == "p_y_z":
                logits = nn.mlp(P, name, z, self._layers(name))
                terms[name] = (ad.log_softmax(logits) * y).sum(axis=1)
            elif name == "p_y_zx":
                logits = nn.mlp(P, name, ad.concat([z, x], axis=1), self._layers(name))
                terms[name] = (ad.log_softmax(logits) * y).sum(axis=1)
            elif name == "p_x_z":
                mean = nn.mlp(P, name, z, self._layers(name))
                terms[name] = ad.gaussian_log_density(x, mean, log_obs)
            elif name == "p_x_zy":
                mean = nn.mlp(P, name, ad.concat([z, y], axis=1), self._layers(name))
                terms[name] = ad.gaussian_log_density(x, mean, log_obs)
        return terms

    def log_joint(self, x, y, z, params=None):
        """``log p(x, z, y)`` per row, without the constant ``log p_D(x)``."""
        P = self.params if params is None else params
        terms = self._factor_terms(P, ad.as_tensor(x), y, ad.as_tensor(z))
        total = None
        for t in terms.values():
            total = t if total is None else total + t
        return total

    # ------------------------------------------------------------------
    # objective

    def elbo(self, x, y, rng=None, noise=None, params=None):
        """Batch-mean single-sample lower bound ``E_q[log p(x,z,y) - log q(z|x,y)]``."""
        P = self.params if params is None else params
        x = ad.as_tensor(x)
        y = _onehot(y, self.config.class_count)
        m, lv = self._encoder(P, x, y)
        z = ad.reparameterize(m, lv, rng=rng, noise=noise)
        terms = self._factor_terms(P, x, y, z)
        terms["q_z_xy"] = -ad.gaussian_log_density(z, m, lv)
        total = None
        for name, t in terms.items():
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(name)
            total = t if total is None else total + t
        return total.mean()

    # ------------------------------------------------------------------
    # classification

    def sample_log_weights(self, x, noise, params=None):
        """Per-sample class scores, shape ``(K, N, C)``.

        Generative factorisations (and DFZ) return the log importance weights
        ``log p(x, z_c^k, y_c) - log q(z_c^k | x, y_c)`` with ``z_c^k`` drawn
        from the encoder given class ``c``. DFX/DBX return
        ``log p(y_c | z^k, ...)`` with ``z^k ~ p(z | x)``; they never touch a
        density over ``x``.
        """
        P = self.params if params is None else params
        cfg = self.config
        x = ad.as_tensor(x)
        N, D = x.shape
        C, Z = cfg.class_count, cfg.latent_dim
        noise = np.asarray(noise)
        if self.factorization in DISCRIMINATIVE:
            K = noise.shape[0]
            xr = ad.broadcast_to(ad.reshape(x, (1, N, D)), (K, N, D)).reshape(K * N, D)
            m, lv = nn.split_gaussian(nn.mlp(P, "p_z_x", xr, self._layers("p_z_x")), Z)
            z = ad.reparameterize(m, lv, noise=noise.reshape(K * N, Z))
            if self.factorization == "DFX":
                h = ad.concat([z, xr], axis=1)
                head = nn.mlp(P, "p_y_zx", h, self._layers("p_y_zx"))
            else:
                head = nn.mlp(P, "p_y_z", z, self._layers("p_y_z"))
            return ad.log_softmax(head).reshape(K, N, C)
        K = noise.shape[1]
        xr = ad.broadcast_to(ad.reshape(x, (1, 1, N, D)), (C, K, N, D)).reshape(C * K * N, D)
        yr = np.repeat(np.eye(C), K * N, axis=0)
        m, lv = self._encoder(P, xr, yr)
        z = ad.reparameterize(m, lv, noise=noise.reshape(C * K * N, Z))
        log_w = self.log_joint(xr, yr, z, params=P) - ad.gaussian_log_density(z, m, lv)
        # (C, K, N) -> (K, N, C)
        log_w = log_w.reshape(C, K * N)
        return ad.transpose(log_w).reshape(K, N, C)

    def class_logits(self, x, K=None, rng=None, noise=None, params=None):
        """Importance-sampled class logits, shape ``(N, C)``."""
        if noise is None:
            K = self.config.K if K is None else int(K)
            if K < 1:
                raise ValueError("K must be >= 1")
            noise = self.draw_noise(ad.as_tensor(x).shape[0], K, rng)
        lw = self.sample_log_weights(x, noise, params=params)
        K = lw.shape[0]
        return ad.logsumexp(lw, axis=0) - math.log(K)


def _onehot(y, C):
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.ndim == 2:
        return y.astype(np.float64)
    return np.eye(C)[y.astype(np.int64)]


def build_model(config, rng):
    """Initialise exactly the networks the factorisation calls for."""
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    sizes = _net_sizes(config)
    names = sorted((set(CONDITIONALS[config.factorization]) - _FIXED) | {"q_z_xy"})
    params = {}
    for name in names:
        params.update(nn.init_mlp(name, sizes[name], rng.substream(_stable_id(name))))
    log_prior = np.full(config.class_count, -math.log(config.class_count))
    return DeepBayesModel(config, params, log_prior, seed=rng.seed)


def _stable_id(name):
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")


def empirical_log_prior(labels, C):
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=C).astype(np.float64)
    counts = np.maximum(counts, 1.0)  # keep absent classes finite
    return np.log(counts / counts.sum())


def train(model, x, labels, epochs, rng, batch_size=100, learning_rate=1e-3, log_every=None):
    """Adam ascent on the lower bound; returns ``(model, per-epoch mean ELBO)``.

    The model is updated in place. Class log-priors are refreshed from label
    frequencies before the first step.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = model.config.class_count
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    model.log_prior = empirical_log_prior(labels, C)
    state = AdamState(learning_rate=learning_rate)
    onehot = np.eye(C)[labels]
    N = x.shape[0]
    trace = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            with GradientTape() as tape:
                P = {k: tape.watch(v, k) for k, v in model.params.items()}
                try:
                    elbo = model.elbo(x[idx], onehot[idx], rng=rng, params=P)
                except NonFiniteError as err:
                    raise TrainingDivergedError(epoch, err) from err
                loss = -elbo
            grads = tape.backward(loss)
            try:
                adam_step(model.params, grads, state)
            except FloatingPointError as err:
                raise TrainingDivergedError(epoch, err) from err
            total += elbo.item() * len(idx)
        mean_elbo = total / N
        if not math.isfinite(mean_elbo):
            raise TrainingDivergedError(epoch, "non-finite ELBO")
        trace.append(mean_elbo)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d elbo %.4f", epoch, mean_elbo)
    model.trace.extend(trace)
    return model, trace


def predict(logits):
    """Softmax posterior and argmax label (lowest index wins ties)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    post = np.exp(logits - logits.max(axis=-1, keepdims=True))
    post /= post.sum(axis=-1, keepdims=True)
    return np.argmax(logits, axis=-1), post


def predict_model(model, x, K=None, rng=None):
    return predict(model.class_logits(x, K=K, rng=rng))


def marginal_log_density(logits, model=None):
    """``log p(x)`` from logits that estimate ``log p(x, y_c)``."""
    if model is not None and not getattr(model, "has_density", True):
        raise DensityUnavailableError(f"density unavailable for {getattr(model, 'factorization', model)}")
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
