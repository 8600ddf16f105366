"""Fixed random convolutional features.

One frozen 3-layer CNN serves two roles: the perceptual distance inside the
codec objective and the feature extractor for the Fréchet evaluator. Weights
are drawn once from a documented seed and never trained.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, as_tensor, conv2d, relu

FEATURE_SEED = 1618  # default seed for the frozen feature CNN

_SPECS = ((3, 8, 3, 2, 1), (8, 16, 3, 2, 1), (16, 16, 3, 1, 1))  # cin, cout, k, stride, pad


def feature_net(seed: int = FEATURE_SEED):
    """Frozen conv stack parameters: list of (weight, bias, stride, pad)."""
    rng = Rng(seed)
    layers = []
    for cin, cout, k, stride, pad in _SPECS:
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform((cout, cin, k, k)) * 2.0 * bound - bound
        layers.append((Tensor(w), Tensor(np.zeros(cout)), stride, pad))
    return layers


def feature_map(layers, x) -> Tensor:
    """Forward through the frozen stack; differentiable w.r.t. the input."""
    h = as_tensor(x)
    for i, (w, b, stride, pad) in enumerate(layers):
        h = conv2d(h, w, b, stride, pad)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def feature_vectors(layers, images: np.ndarray) -> np.ndarray:
    """Spatially pooled features for a stack of images, as plain numpy."""
    out = feature_map(layers, Tensor(np.asarray(images, dtype=np.float64)))
    return out.data.mean(axis=(2, 3))
