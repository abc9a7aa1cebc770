"""Scalar and vector kernels shared by every loss.

All functions accept a single vector or a 2-D batch (one vector per row)
unless stated otherwise. Logarithms are natural.
"""

import numpy as np

EPS = 1e-12


class InvalidInput(ValueError):
    pass


class InvalidParameter(ValueError):
    pass


def l2_normalize(v, return_norm=False):
    """Scale ``v`` (or each row of ``v``) to unit Euclidean norm.

    Zero vectors are returned unchanged. With ``return_norm`` the norms are
    returned as well, so callers can flag degenerate rows (norm == 0).
    """
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    out = v / safe
    if return_norm:
        return out, norm[..., 0]
    return out


def log_softmax_temperature(logits, sigma):
    if not sigma > 0:
        raise InvalidParameter(f"temperature must be positive, got {sigma}")
    z = np.asarray(logits, dtype=float) / sigma
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temperature(logits, sigma=1.0):
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] < 1:
        raise InvalidInput("softmax of an empty vector")
    if not sigma > 0:
        raise InvalidParameter(f"temperature must be positive, got {sigma}")
    z = logits / sigma
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def entropy(p):
    """Shannon entropy along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=float)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def kl_divergence(p, q):
    p = np.clip(np.asarray(p, dtype=float), EPS, None)
    q = np.clip(np.asarray(q, dtype=float), EPS, None)
    return (p * (np.log(p) - np.log(q))).sum(axis=-1)


def symmetric_kl(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InvalidInput(f"length mismatch: {p.shape} vs {q.shape}")
    return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p))


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise InvalidInput("cosine similarity of a zero vector")
    return np.clip((u * v).sum(axis=-1) / (nu * nv), -1.0, 1.0)


def argmax_tiebreak(values):
    """Index of the maximum along the last axis; ties go to the smallest index."""
    values = np.asarray(values, dtype=float)
    if values.size == 0 or values.shape[-1] == 0:
        raise InvalidInput("argmax of an empty vector")
    # np.argmax already returns the first occurrence
    return np.argmax(values, axis=-1)
