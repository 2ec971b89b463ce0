"""Plain MLP building blocks over named parameter dicts."""
import math

import numpy as np

from . import autodiff as ad


def mlp_shapes(prefix, sizes):
    shapes = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}.W{i}"] = (n_in, n_out)
        shapes[f"{prefix}.b{i}"] = (n_out,)
    return shapes


def init_mlp(prefix, sizes, rng):
    """He-uniform weights and zero biases, drawn layer by layer from ``rng``."""
    params = {}
    for name, shape in mlp_shapes(prefix, sizes).items():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / shape[0])
            params[name] = (2.0 * rng.uniform(shape) - 1.0) * bound
        else:
            params[name] = np.zeros(shape)
    return params


def mlp(params, prefix, h, n_layers, masks=None):
    """ReLU hidden layers, linear output.

    ``masks`` optionally holds one multiplicative dropout mask per hidden
    layer (already scaled by the keep probability).
    """
    for i in range(n_layers):
        h = ad.matmul(h, params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = ad.relu(h)
            if masks is not None:
                h = h * masks[i]
    return h


def split_gaussian(h, dim):
    """Split a ``2*dim`` head into ``(mean, log_var)``."""
    return h[:, :dim], h[:, dim:]
