"""Static SVG exports: loss curves, score curves and a PCA feature scatter."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .atg import OOD  # noqa: E402

LOSS_SERIES = ("loss_lpb", "loss_pda", "loss_atg", "loss_uc", "loss_total")
SCORE_SERIES = ("os_star", "unk", "hos")

# fixed ids and no timestamp so repeated exports are byte-identical
matplotlib.rcParams["svg.hashsalt"] = "uasa"


def _save(fig, path):
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc.strerror or exc}") from exc
    finally:
        plt.close(fig)
    return path


def _series(rows, key):
    return np.array([float(r.get(key, np.nan)) for r in rows])


def plot_losses(rows, path):
    """One curve per loss component over epochs."""
    if not rows:
        raise ValueError("metrics log is empty")
    epochs = _series(rows, "epoch")
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOSS_SERIES:
        ax.plot(epochs, _series(rows, key), marker="o", markersize=3, label=key[5:], gid=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend()
    return _save(fig, path)


def plot_scores(rows, path):
    """OS*, UNK and HOS over epochs."""
    if not rows:
        raise ValueError("metrics log is empty")
    epochs = _series(rows, "epoch")
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in SCORE_SERIES:
        ax.plot(epochs, _series(rows, key), marker="o", markersize=3, label=key, gid=key)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("epoch")
    ax.legend()
    return _save(fig, path)


def pca_2d(X):
    """Project rows onto the top two principal axes of their covariance.

    Axis signs are fixed so the largest-magnitude loading is positive. A
    zero-variance input maps every row to the origin.
    """
    X = np.asarray(X, float)
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(len(X), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order]
    flip = np.sign(axes[np.abs(axes).argmax(axis=0), np.arange(axes.shape[1])])
    axes = axes * np.where(flip == 0, 1.0, flip)
    out = centered @ axes
    out[:, vals[order] <= 1e-12 * max(vals.max(), 1e-300)] = 0.0
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def plot_feature_scatter(source_features, target_features, target_labels, path):
    """PCA scatter of pooled source and target features.

    Source points are grey; target points are colored by verdict, with OOD
    verdicts in black. Returns ``(path, n_points)``.
    """
    fs = np.atleast_2d(np.asarray(source_features, float))
    ft = np.atleast_2d(np.asarray(target_features, float))
    labels = np.asarray(target_labels)
    xy = pca_2d(np.concatenate([fs, ft]))
    src, tgt = xy[:len(fs)], xy[len(fs):]
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(src[:, 0], src[:, 1], s=6, c="0.7", marker="s", label="source", gid="source")
    ood = labels == OOD
    ax.scatter(tgt[~ood, 0], tgt[~ood, 1], s=6, c=labels[~ood], cmap="tab10",
               vmin=0, vmax=9, label="target ID", gid="target-id")
    ax.scatter(tgt[ood, 0], tgt[ood, 1], s=6, c="k", marker="x", label="target OOD", gid="target-ood")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(loc="best", markerscale=2)
    return _save(fig, path), len(xy)


def export_plots(rows, out_dir, source_features=None, target_features=None, target_labels=None):
    """Write ``losses.svg`` and ``scores.svg`` (and ``features.svg`` when
    features are given) into ``out_dir``; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [plot_losses(rows, os.path.join(out_dir, "losses.svg")),
             plot_scores(rows, os.path.join(out_dir, "scores.svg"))]
    if source_features is not None and target_features is not None:
        path, _ = plot_feature_scatter(source_features, target_features, target_labels,
                                       os.path.join(out_dir, "features.svg"))
        paths.append(path)
    return paths
