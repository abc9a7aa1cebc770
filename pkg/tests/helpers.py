"""Shared builders for the test suite."""

import numpy as np

from uasa.lpb import normalize_grad, renormalize_prototypes
from uasa.numeric import l2_normalize


def unit_rows(rng, n, d):
    return l2_normalize(rng.normal(size=(n, d)))


def random_protos(rng, d, k):
    return renormalize_prototypes(rng.normal(size=(d, k)))


def head_closure(loss_fn):
    """Wrap ``loss_fn(X_unit, M) -> (loss, gX, gM)`` as a grad_check closure
    over ``[X_raw, M]``; the chain runs through row normalization."""

    def fn(params):
        x_raw, M = params
        x = l2_normalize(x_raw)
        loss, gx, gm = loss_fn(x, M)
        return loss, [normalize_grad(x_raw, x, gx), gm]

    return fn


def brute_confusion(pred, truth, k):
    """Double-loop confusion counter; index k collects every OOD label."""
    cm = [[0] * (k + 1) for _ in range(k + 1)]
    for p, t in zip(pred, truth):
        row = t if t < k else k
        col = p if p >= 0 else k
        cm[row][col] += 1
    return np.array(cm)


def brute_nearest_center(centers, x):
    """Exhaustive scan for the center with the largest cosine to ``x``."""
    best, best_val = 0, -np.inf
    xn = x / np.linalg.norm(x)
    for i, c in enumerate(centers):
        val = float(np.dot(c / np.linalg.norm(c), xn))
        if val > best_val:
            best, best_val = i, val
    return best
