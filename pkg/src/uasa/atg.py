"""Adaptive threshold generation.

Target samples are grouped by their K_s-way argmax, each group's mean
posterior entropy is turned into a per-class entropy threshold, and a sample
is in-distribution when its entropy does not exceed the threshold of its
argmax class.
"""

from dataclasses import dataclass

import numpy as np

from .lpb import InvalidState, entropy_grad_scores
from .numeric import argmax_tiebreak, entropy, log_softmax_temperature

OOD = -1

THRESHOLD_MODES = ("adaptive", "fixed")
EQ5_MODES = ("corrected", "literal")
EQ7_MODES = ("literal", "repel")


def assign_pseudo_classes(posteriors):
    return argmax_tiebreak(posteriors)


def pseudo_class_sets(assignment, n_classes):
    return [np.flatnonzero(assignment == c) for c in range(n_classes)]


def class_mean_entropy(assignment, posteriors, n_classes):
    """Mean entropy per pseudo-class. Returns ``(T, defined)``; empty classes
    get ``T = nan`` and ``defined = False``."""
    q = entropy(posteriors)
    counts = np.bincount(assignment, minlength=n_classes)
    sums = np.bincount(assignment, weights=q, minlength=n_classes)
    defined = counts > 0
    T = np.full(n_classes, np.nan)
    T[defined] = sums[defined] / counts[defined]
    return T, defined


def adaptive_thresholds(T, alpha, n_classes, mode="corrected"):
    """Per-class entropy thresholds from the class mean entropies ``T``.

    ``corrected``: ``alpha (max + min - T_i) / (max - min) ln K``, positive and
    decreasing in ``T_i``. ``literal``: ``alpha (T_i - min - max) / (max - min) ln K``.
    When ``max == min`` every defined class gets ``alpha ln K``. Undefined
    entries (nan) stay nan.
    """
    T = np.asarray(T, float)
    defined = np.isfinite(T)
    if not defined.any():
        raise InvalidState("no pseudo-class has members; thresholds undefined")
    lo, hi = T[defined].min(), T[defined].max()
    log_k = np.log(n_classes)
    o = np.full_like(T, np.nan)
    if hi == lo:
        o[defined] = alpha * log_k
        return o
    if mode == "corrected":
        o[defined] = alpha * (hi + lo - T[defined]) / (hi - lo) * log_k
    elif mode == "literal":
        o[defined] = alpha * (T[defined] - lo - hi) / (hi - lo) * log_k
    else:
        raise ValueError(f"unknown threshold formula {mode!r}")
    return o


def fixed_thresholds(n_classes):
    return np.full(n_classes, np.log(n_classes) / 2)


@dataclass
class ThresholdTable:
    T: np.ndarray
    o: np.ndarray
    alpha: float
    defined: np.ndarray

    @classmethod
    def from_posteriors(cls, posteriors, alpha, mode="adaptive", eq5="corrected"):
        k = posteriors.shape[1]
        assignment = assign_pseudo_classes(posteriors)
        T, defined = class_mean_entropy(assignment, posteriors, k)
        if mode == "fixed":
            o = fixed_thresholds(k)
        elif mode == "adaptive":
            o = adaptive_thresholds(T, alpha, k, eq5)
        else:
            raise ValueError(f"unknown threshold mode {mode!r}")
        return cls(T, o, alpha, defined)


@dataclass
class Decisions:
    """Per-sample verdicts: ``label`` is the class, or ``OOD`` (-1)."""

    label: np.ndarray
    argmax: np.ndarray
    entropy: np.ndarray
    confidence: np.ndarray
    flagged: np.ndarray  # argmax class had no threshold

    def __len__(self):
        return len(self.label)

    @property
    def is_ood(self):
        return self.label == OOD

    def __getitem__(self, idx):
        return Decisions(self.label[idx], self.argmax[idx], self.entropy[idx],
                         self.confidence[idx], self.flagged[idx])


def confidence_scores(posteriors, is_ood):
    """Max posterior for ID verdicts, entropy / ln K for OOD verdicts."""
    posteriors = np.atleast_2d(posteriors)
    k = posteriors.shape[1]
    ood_conf = entropy(posteriors) / np.log(k) if k > 1 else np.ones(len(posteriors))
    return np.where(is_ood, ood_conf, posteriors.max(axis=1))


def decide(posteriors, thresholds):
    """Apply ``ID(c) iff Q(p) <= o_c`` with ``c`` the argmax class."""
    posteriors = np.atleast_2d(np.asarray(posteriors, float))
    o = np.asarray(thresholds, float)
    c = argmax_tiebreak(posteriors)
    q = entropy(posteriors)
    oc = o[c]
    flagged = ~np.isfinite(oc)
    ood = flagged | (q > np.where(flagged, np.inf, oc))
    label = np.where(ood, OOD, c)
    return Decisions(label, c, q, confidence_scores(posteriors, ood), flagged)


def separation_terms(entropies, sample_thresholds, delta):
    """Per-sample ``(o - Q)^2``, zeroed inside the gate ``(o - Q)^2 < delta``
    and wherever the threshold is undefined."""
    q = np.asarray(entropies, float)
    o = np.asarray(sample_thresholds, float)
    valid = np.isfinite(o)
    diff = np.where(valid, q - np.where(valid, o, 0.0), 0.0)
    e = diff * diff
    return np.where(valid & (e >= delta), e, 0.0)


def atg_loss(features, M, sigma, thresholds, delta, mode="repel"):
    """Gated squared distance between each sample's entropy and the threshold
    of its argmax class, averaged over the batch. Inside the gate
    (``e < delta``) a sample contributes nothing. ``repel`` (the default)
    negates the average so minimizing it pushes entropies away from the
    thresholds; ``literal`` keeps the plain average. Thresholds are constants.

    Returns ``(loss, grad_features, grad_M)``.
    """
    if mode not in EQ7_MODES:
        raise ValueError(f"unknown separation mode {mode!r}")
    features = np.atleast_2d(np.asarray(features, float))
    b = len(features)
    scores = features @ M
    logp = log_softmax_temperature(scores, sigma)
    p = np.exp(logp)
    q = -(p * logp).sum(axis=1)
    o = np.asarray(thresholds, float)[argmax_tiebreak(scores)]
    valid = np.isfinite(o)
    diff = np.where(valid, q - np.where(valid, o, 0.0), 0.0)
    terms = separation_terms(q, o, delta)
    active = terms > 0
    sign = 1.0 if mode == "literal" else -1.0
    loss = sign * terms.sum() / b
    dq = np.where(active, sign * 2.0 * diff / b, 0.0)
    g = entropy_grad_scores(p, logp, q, sigma) * dq[:, None]
    return loss, g @ M.T, features.T @ g
