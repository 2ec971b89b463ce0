"""Grey- and black-box substitute training (distillation).

Black-box mode follows Jacobian-based dataset augmentation: after each
outer loop every point ``x`` with queried label ``y`` spawns
``x + lam * grad_x p(x)^T y`` computed on the substitute, and the victim
labels the new points. The dataset therefore doubles every loop.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .bnn import MlpClassifier, MlpConfig, train_classifier
from .detection import batched_logits
from .models import predict


@dataclass
class SubstituteConfig:
    mode: str = "black"  # "grey" or "black"
    outer_loops: int = 6
    lam: float = 0.1
    epochs_per_loop: int = 10
    hidden: tuple = (128, 128)
    learning_rate: float = 1e-3
    batch_size: int = 100
    grey_epochs: int = 50
    K: int = 10
    clip_box: bool = True

    def __post_init__(self):
        if self.mode not in ("grey", "black"):
            raise ValueError(f"unknown threat mode {self.mode!r}")
        if self.outer_loops < 1:
            raise ValueError("outer_loops must be >= 1")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        self.hidden = tuple(self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class SubstituteResult:
    model: MlpClassifier
    queries: int
    dataset_sizes: list
    inputs: np.ndarray
    labels: np.ndarray


def query_sizes(seed_size, outer_loops):
    """Dataset size at each outer loop: ``|D_t| = seed_size * 2**(t-1)``."""
    if outer_loops < 1:
        raise ValueError("outer_loops must be >= 1")
    return [seed_size * 2**t for t in range(outer_loops)]


def victim_probabilities(victim, x, K, rng):
    _, post = predict(batched_logits(victim, x, K, rng))
    return post


def victim_labels(victim, x, K, rng):
    labels, _ = predict(batched_logits(victim, x, K, rng))
    return labels


def jacobian_augment(substitute, x, labels, lam, clip_box=True):
    """``x + lam * d p_y(x) / dx`` for each row, ``p`` the substitute's probabilities."""
    onehot = np.eye(substitute.num_classes)[labels]
    with GradientTape() as tape:
        xt = tape.watch(x, "x")
        logits = substitute.class_logits(xt, K=1)
        prob = (ad.softmax(logits) * onehot).sum()
    x_new = x + lam * tape.backward(prob)["x"]
    return np.clip(x_new, 0.0, 1.0) if clip_box else x_new


def train_substitute(victim, config, seed_x, rng):
    """Distil ``victim`` into an MLP; returns a :class:`SubstituteResult`."""
    seed_x = np.asarray(seed_x, dtype=np.float64)
    D, C = seed_x.shape[1], victim.num_classes
    sub = MlpClassifier.build(MlpConfig(D, C, config.hidden, dropout=0.0, K=1), rng.substream(0))
    if config.mode == "grey":
        probs = victim_probabilities(victim, seed_x, config.K, rng.substream(1))
        train_classifier(
            sub, seed_x, probs, config.grey_epochs, rng.substream(2), config.batch_size, config.learning_rate
        )
        return SubstituteResult(sub, seed_x.shape[0], [seed_x.shape[0]], seed_x, np.argmax(probs, axis=1))
    x = seed_x
    labels = victim_labels(victim, x, config.K, rng.substream(1))
    sizes = []
    state = None
    for t in range(config.outer_loops):
        sizes.append(x.shape[0])
        _, state = train_classifier(
            sub, x, labels, config.epochs_per_loop, rng.substream(100 + t),
            config.batch_size, config.learning_rate, state,
        )
        if t == config.outer_loops - 1:
            break
        x_new = jacobian_augment(sub, x, labels, config.lam, config.clip_box)
        y_new = victim_labels(victim, x_new, config.K, rng.substream(200 + t))
        x = np.concatenate([x, x_new])
        labels = np.concatenate([labels, y_new])
    return SubstituteResult(sub, x.shape[0], sizes, x, labels)
