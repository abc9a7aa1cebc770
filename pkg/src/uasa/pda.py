"""Prototype-guided domain alignment.

Each target sample is scored against every cached target feature in the
memory bank and every class prototype (the table ``F = [Z, M]``); the loss is
the entropy of that neighbourhood distribution, excluding the sample's own
bank slot.
"""

import numpy as np

from .lpb import entropy_grad_scores
from .numeric import InvalidInput

PDA_NORMS = ("literal", "mean")


class MemoryBank:
    """One unit-norm row per target sample; row j always belongs to sample j."""

    def __init__(self, n, dim):
        self.Z = np.zeros((n, dim))
        self.initialized = np.zeros(n, dtype=bool)
        self.staleness = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.Z)

    def update(self, indices, features):
        indices = np.atleast_1d(np.asarray(indices))
        features = np.atleast_2d(np.asarray(features, float))
        if len(indices) and (indices.min() < 0 or indices.max() >= len(self.Z)):
            raise InvalidInput(f"bank index out of range [0, {len(self.Z)})")
        self.Z[indices] = features
        self.initialized[indices] = True
        self.staleness += 1
        self.staleness[indices] = 0
        return self

    def fill(self, features):
        return self.update(np.arange(len(self.Z)), features)


def _support_mask(bank, n_classes, indices):
    """Boolean (B, N + K) mask of admissible columns of F for each sample."""
    n = len(bank)
    mask = np.ones((len(indices), n + n_classes), dtype=bool)
    mask[:, :n] &= bank.initialized[None, :]
    mask[np.arange(len(indices)), indices] = False
    return mask


def _neighbourhood(bank, M, indices, features, sigma):
    F = np.concatenate([bank.Z, M.T], axis=0)
    scores = features @ F.T
    mask = _support_mask(bank, M.shape[1], indices)
    z = np.where(mask, scores / sigma, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.where(mask, np.exp(z), 0.0)
    logp = np.where(mask, z - np.log(ez.sum(axis=1, keepdims=True)), 0.0)
    p = np.where(mask, np.exp(logp), 0.0)
    return F, mask, p, logp


def pda_posterior(bank, M, index, feature, sigma):
    """Distribution over the support of ``F`` for one sample: admissible bank
    rows first (in row order), then the prototypes. Returns ``(p, columns)``
    where ``columns`` are the indices into ``F`` that make up the support."""
    feature = np.asarray(feature, float)[None, :]
    _, mask, p, _ = _neighbourhood(bank, M, np.array([index]), feature, sigma)
    cols = np.flatnonzero(mask[0])
    return p[0, cols], cols


def pda_loss(bank, M, indices, features, sigma, normalizer="literal"):
    """Neighbourhood entropy summed over the batch and divided by
    ``|B| (N_t + K_s)`` (``literal``) or by ``|B|`` (``mean``). Bank rows are
    constants; gradients reach the batch features and the prototypes.

    Returns ``(loss, grad_features, grad_M)``.
    """
    indices = np.asarray(indices)
    features = np.atleast_2d(np.asarray(features, float))
    if len(indices) != len(features):
        raise InvalidInput("one bank index per feature row required")
    if len(indices) and (indices.min() < 0 or indices.max() >= len(bank)):
        raise InvalidInput("bank index out of range")
    n, k = len(bank), M.shape[1]
    b = len(features)
    F, mask, p, logp = _neighbourhood(bank, M, indices, features, sigma)
    H = -(p * logp).sum(axis=1)
    if normalizer == "literal":
        scale = 1.0 / (b * (n + k))
    elif normalizer == "mean":
        scale = 1.0 / b
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    loss = scale * H.sum()
    g = scale * entropy_grad_scores(p, logp, H, sigma)
    g[~mask] = 0.0
    gx = g @ F
    gM = features.T @ g[:, n:]
    return loss, gx, gM
