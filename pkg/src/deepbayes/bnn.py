"""Feed-forward classifiers: the dropout BNN baseline and attack substitutes."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import GradientTape
from .optim import AdamState, adam_step


@dataclass
class MlpConfig:
    input_dim: int
    class_count: int
    hidden: tuple = (256, 256)
    dropout: float = 0.3
    K: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def bnn_config(input_dim, class_count, base_hidden=(128, 128), width_multiplier=2, dropout=0.3, K=10):
    """Dropout baseline with ``width_multiplier`` times the hidden units of the LVM nets."""
    hidden = tuple(int(h * width_multiplier) for h in base_hidden)
    return MlpConfig(input_dim, class_count, hidden, dropout, K)


class MlpClassifier:
    """ReLU MLP with optional Bernoulli dropout on hidden layers.

    With dropout, prediction averages ``K`` softmax outputs under independent
    masks; the returned logits are the log of that average.
    """

    has_density = False
    factorization = "MLP"

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.trace = []

    @classmethod
    def build(cls, config, rng):
        sizes = [config.input_dim, *config.hidden, config.class_count]
        return cls(config, nn.init_mlp("net", sizes, rng))

    @property
    def num_classes(self):
        return self.config.class_count

    @property
    def input_dim(self):
        return self.config.input_dim

    @property
    def n_layers(self):
        return len(self.config.hidden) + 1

    def copy(self):
        return MlpClassifier(self.config, {k: v.copy() for k, v in self.params.items()})

    def draw_noise(self, n, K, rng):
        """Dropout masks, one ``(K, n, width)`` array per hidden layer, pre-scaled."""
        keep = 1.0 - self.config.dropout
        if self.config.dropout == 0.0:
            return [np.ones((K, n, h)) for h in self.config.hidden]
        return [rng.bernoulli(keep, (K, n, h)) / keep for h in self.config.hidden]

    def sample_log_weights(self, x, noise, params=None):
        P = self.params if params is None else params
        x = ad.as_tensor(x)
        N, D = x.shape
        K = noise[0].shape[0] if noise else 1
        xr = ad.broadcast_to(ad.reshape(x, (1, N, D)), (K, N, D)).reshape(K * N, D)
        masks = [m.reshape(K * N, -1) for m in noise] if noise else None
        h = nn.mlp(P, "net", xr, self.n_layers, masks=masks)
        return ad.log_softmax(h).reshape(K, N, self.num_classes)

    def class_logits(self, x, K=None, rng=None, noise=None, params=None):
        if noise is None:
            K = (self.config.K if self.config.dropout > 0 else 1) if K is None else int(K)
            noise = self.draw_noise(ad.as_tensor(x).shape[0], K, rng)
        lw = self.sample_log_weights(x, noise, params)
        return ad.logsumexp(lw, axis=0) - math.log(lw.shape[0])


def train_classifier(model, x, targets, epochs, rng, batch_size=100, learning_rate=1e-3, state=None):
    """Cross-entropy training with one dropout mask per example per step.

    ``targets`` are integer labels or rows of class probabilities (soft
    labels, used for grey-box distillation). Returns the per-epoch mean loss
    and the optimiser state so training can be resumed.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = np.eye(model.num_classes)[targets.astype(np.int64)]
    state = state or AdamState(learning_rate=learning_rate)
    N = x.shape[0]
    trace = []
    for _ in range(epochs):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            noise = model.draw_noise(len(idx), 1, rng)
            with GradientTape() as tape:
                P = {k: tape.watch(v, k) for k, v in model.params.items()}
                lw = model.sample_log_weights(x[idx], noise, P).reshape(len(idx), model.num_classes)
                loss = -(lw * targets[idx]).sum(axis=1).mean()
            adam_step(model.params, tape.backward(loss), state)
            total += loss.item() * len(idx)
        trace.append(total / N)
    model.trace.extend(trace)
    return trace, state


def bnn_predict(model, x, K=None, rng=None):
    """Label and mean softmax over ``K`` independent dropout masks."""
    logits = model.class_logits(x, K=K, rng=rng).data
    post = np.exp(logits - logits.max(axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return np.argmax(post, axis=1), post
