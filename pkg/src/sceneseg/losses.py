"""Unsupervised training losses on the network's K-channel features.

* clustering: cross-entropy of each pixel's features against its own argmax
  label (the label is a constant, no gradient flows through the argmax);
* contrastive: ``exp(-L1)`` between each pixel and the same pixel of a
  different patch, the pairing given by a fixed-point-free shuffle.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import GradPair, register_op
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossReport:
    clustering: float
    contrastive: float

    @property
    def total(self):
        return self.clustering + self.contrastive


def assign_pseudo_labels(y):
    """Per-pixel argmax over channels; ties resolve to the lowest index."""
    if y.shape[1] < 2:
        raise ConfigError("need at least two feature channels")
    return y.argmax(axis=1)


def clustering_loss(y, labels):
    """Mean softmax cross-entropy of ``y`` against ``labels``, and its gradient."""
    b, k, h, w = y.shape
    if labels.shape != (b, h, w):
        raise ShapeError("pseudo-label shape", (b, h, w), labels.shape)
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    shifted = y - y.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    denom = ex.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    count = b * h * w
    loss = -np.take_along_axis(logp, labels[:, None], axis=1).sum(dtype=np.float64) / count
    grad = ex / denom
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels[:, None], 1, axis=1)
    return float(loss), ((grad - onehot) / count).astype(y.dtype, copy=False)


def self_clustering_loss(y):
    """Fused ``assign_pseudo_labels`` + ``clustering_loss`` (training hot path).

    Returns ``(labels, loss, grad)``.
    """
    return kernels.softmax_xent(y)


def shuffle_pairing(B, rng, max_draws=100):
    """Random derangement of ``range(B)``.

    Draws uniform permutations until one has no fixed point; gives up after
    ``max_draws`` and returns the rotation ``i -> i + 1``.
    """
    if B < 2:
        raise ConfigError("shuffle pairing needs at least two patches")
    idx = np.arange(B)
    for _ in range(max_draws):
        perm = rng.permutation(B)
        if not np.any(perm == idx):
            return perm
    return np.roll(idx, -1)


def contrastive_loss(y, perm):
    """Mean of ``exp(-|y[b] - y[perm[b]]|_1)`` over pixels, with gradient.

    Both members of every pair receive gradient. Zero differences get a
    zero subgradient.
    """
    perm = np.asarray(perm)
    B = y.shape[0]
    if B < 2:
        raise ConfigError("contrastive loss needs at least two patches")
    if sorted(perm.tolist()) != list(range(B)):
        raise ContractError(f"{perm.tolist()} is not a permutation of range({B})")
    if np.any(perm == np.arange(B)):
        raise ContractError("pairing permutation has a fixed point")
    return kernels.contrastive(y, perm)


def _as_pair(loss, grad):
    return GradPair(np.asarray(loss), lambda dout: (float(dout) * grad,))


register_op("clustering_loss", lambda y, labels: _as_pair(*clustering_loss(y, labels)), ["y"])
register_op("contrastive_loss", lambda y, perm: _as_pair(*contrastive_loss(y, perm)), ["y"])
