"""Label-driven prototypes: a bias-free cosine classifier over unit-norm
features whose unit-norm weight columns act as class prototypes."""

from dataclasses import dataclass

import numpy as np

from .numeric import InvalidInput, log_softmax_temperature, softmax_temperature


class InvalidState(RuntimeError):
    pass


@dataclass
class PrototypeBank:
    M: np.ndarray  # (d, K_s), column c is the prototype of class c
    sigma: float = 0.05

    @classmethod
    def random(cls, dim, n_classes, sigma=0.05, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        M = rng.normal(size=(dim, n_classes))
        return cls(renormalize_prototypes(M), sigma)

    @property
    def n_classes(self):
        return self.M.shape[1]

    def posterior(self, features):
        return source_posterior(self.M, features, self.sigma)


def source_posterior(M, features, sigma):
    """K_s-way temperature softmax over the scores ``m_c . x``."""
    return softmax_temperature(np.asarray(features, float) @ M, sigma)


def head_grads(features, M, grad_scores):
    """Chain a gradient w.r.t. the scores ``X @ M`` back to ``X`` and ``M``."""
    return grad_scores @ M.T, features.T @ grad_scores


def entropy_grad_scores(p, logp, H, sigma):
    """d H(softmax(z / sigma)) / dz for each row."""
    return -(p * (logp + H[:, None])) / sigma


def lpb_loss(M, features, labels, sigma):
    """Cross-entropy with the ``1 / (N K)`` normalization, N = batch size.

    Returns ``(loss, grad_features, grad_M)``.
    """
    features = np.atleast_2d(np.asarray(features, float))
    labels = np.asarray(labels)
    n, k = len(features), M.shape[1]
    if n == 0:
        raise InvalidInput("empty source batch")
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidInput(f"label out of range [0, {k})")
    scores = features @ M
    logp = log_softmax_temperature(scores, sigma)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / (n * k)
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    g /= n * k * sigma
    gx, gM = head_grads(features, M, g)
    return loss, gx, gM


def renormalize_prototypes(M):
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        raise InvalidState(f"zero prototype column(s) {np.flatnonzero(norms == 0).tolist()}")
    return M / norms


def normalize_grad(features_raw, features_unit, grad_unit):
    """Back-propagate through ``x / ||x||`` row-wise."""
    norms = np.linalg.norm(features_raw, axis=-1, keepdims=True)
    norms = np.where(norms > 0, norms, 1.0)
    proj = (features_unit * grad_unit).sum(axis=-1, keepdims=True)
    return (grad_unit - features_unit * proj) / norms

