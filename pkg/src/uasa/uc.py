"""Uncertainty-aware target clustering: spherical k-means over the memory
bank, confidence-weighted pairs, and a symmetric-KL pair alignment loss."""

import math
from dataclasses import dataclass, field

import numpy as np

from .atg import OOD
from .data import InvalidConfig
from .numeric import InvalidInput, argmax_tiebreak, log_softmax_temperature

UC_MODES = ("kl", "ce")
UC_NORMS = ("batch", "pairs")


@dataclass
class ClusterSet:
    centers: np.ndarray  # (A, d), unit-norm rows
    n_iter: int = 0
    objective: list = field(default_factory=list)

    @property
    def A(self):
        return len(self.centers)


def n_clusters(n_classes, factor=2.5):
    return int(math.ceil(factor * n_classes - 1e-9))


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _unit_rows(C):
    n = np.linalg.norm(C, axis=1, keepdims=True)
    return C / np.where(n > 0, n, 1.0)


def kmeans_plus_plus(X, A, rng):
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, A):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters; take any unused row
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt:nxt + 1])[:, 0])
    return X[idx].copy()


def kmeans(X, A, seed, max_iter=100, tol=1e-6):
    """Seeded k-means++ then Lloyd iterations with unit-norm centers.

    Empty clusters are re-seeded to the point farthest from its own center.
    ``objective`` records the sum of squared distances after every assignment.
    """
    X = np.asarray(X, float)
    if len(X) < A:
        raise InvalidConfig(f"cannot fit {A} clusters to {len(X)} points")
    rng = np.random.default_rng(seed)
    C = _unit_rows(kmeans_plus_plus(X, A, rng))
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        lab = np.argmin(D, axis=1)
        history.append(float(D[np.arange(len(X)), lab].sum()))
        counts = np.bincount(lab, minlength=A)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, X)
        new = C.copy()
        full = counts > 0
        new[full] = _unit_rows(sums[full])
        own = D[np.arange(len(X)), lab].copy()
        for a in np.flatnonzero(~full):
            far = int(np.argmax(own))
            new[a] = _unit_rows(X[far:far + 1])[0]
            own[far] = -1.0
        shift = np.abs(new - C).max()
        C = new
        if shift < tol:
            break
    return ClusterSet(C, it, history)


def assign_cluster(clusters, features):
    """Index of the center with the largest cosine similarity (ties -> smallest)."""
    C = clusters.centers if isinstance(clusters, ClusterSet) else np.asarray(clusters)
    features = np.atleast_2d(np.asarray(features, float))
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidInput("cannot assign a zero feature to a cluster")
    cos = (features / norms) @ _unit_rows(C).T
    return argmax_tiebreak(cos)


def pair_weights(labels, confidence, cluster_idx):
    """Symmetric (B, B) matrix of pair weights, zero on the diagonal.

    Two ID verdicts match on equal class; two OOD verdicts match on equal
    cluster index. Matched pairs get the mean of their confidences.
    """
    labels = np.asarray(labels)
    s = np.asarray(confidence, float)
    cl = np.asarray(cluster_idx)
    same = labels[:, None] == labels[None, :]
    ood = labels == OOD
    both_ood = ood[:, None] & ood[None, :]
    match = same & (~both_ood | (cl[:, None] == cl[None, :]))
    W = np.where(match, 0.5 * (s[:, None] + s[None, :]), 0.0)
    np.fill_diagonal(W, 0.0)
    return W


def uc_loss(features, M, sigma, W, mode="kl", normalizer="batch"):
    """``(1/|B|) sum_{i<j} W_ij L(p_i, p_j)`` over unordered batch pairs with
    ``L`` the symmetric KL (``kl``) or the symmetrized cross-entropy against
    the partner's argmax (``ce``). ``W`` is a constant. ``normalizer="pairs"``
    divides by the number of unordered pairs instead of ``|B|``.

    Returns ``(loss, grad_features, grad_M)``.
    """
    features = np.atleast_2d(np.asarray(features, float))
    W = np.asarray(W, float)
    b = len(features)
    if normalizer == "batch":
        b_norm = b
    elif normalizer == "pairs":
        b_norm = max(b * (b - 1) / 2, 1)
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    scores = features @ M
    lp = log_softmax_temperature(scores, sigma)
    p = np.exp(lp)
    if mode == "kl":
        neg_h = (p * lp).sum(axis=1)
        kl = neg_h[:, None] - p @ lp.T  # kl[i, j] = KL(p_i || p_j)
        pair = 0.5 * (kl + kl.T)
        loss = 0.5 * (W * pair).sum() / b_norm
        w = W.sum(axis=1)
        v = w[:, None] * lp - W @ lp
        s = (p * v).sum(axis=1, keepdims=True)
        g = 0.5 * (p * (v - s) + w[:, None] * p - W @ p)
    elif mode == "ce":
        k = p.shape[1]
        hard = np.eye(k)[argmax_tiebreak(p)]  # partner targets, constants
        ce = -lp @ hard.T  # ce[i, j] = -log p_i[argmax p_j]
        pair = 0.5 * (ce + ce.T)
        loss = 0.5 * (W * pair).sum() / b_norm
        w = W.sum(axis=1)
        g = 0.5 * (w[:, None] * p - W @ hard)
    else:
        raise ValueError(f"unknown clustering loss {mode!r}")
    g = g / (b_norm * sigma)
    return loss, g @ M.T, features.T @ g
