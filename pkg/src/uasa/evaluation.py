"""OS*, UNK and HOS scoring, plus the ablation suites."""

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .atg import OOD

log = logging.getLogger(__name__)


@dataclass
class MetricsSummary:
    per_class_acc: np.ndarray  # nan for ID classes absent from the ground truth
    os_star: float
    unk: float  # nan when the ground truth has no OOD sample
    hos: float
    confusion: np.ndarray  # (K+1, K+1): rows truth, columns verdict; index K = OOD
    unk_defined: bool = True
    classes_present: np.ndarray = None
    flags: list = field(default_factory=list)

    def as_row(self):
        return {"os_star": self.os_star, "unk": self.unk, "hos": self.hos}


def hos(os_star, unk):
    denom = os_star + unk
    return 2 * os_star * unk / denom if denom > 0 else 0.0


def confusion_counts(pred_labels, truth, n_id_classes):
    k = n_id_classes
    t = np.where(np.asarray(truth) >= k, k, truth)
    p = np.where(np.asarray(pred_labels) == OOD, k, pred_labels)
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def evaluate(decisions, truth, n_id_classes):
    """Score verdicts against ground truth (classes ``>= n_id_classes`` are OOD).

    OS* averages per-class accuracy over the ID classes present in the ground
    truth; an OOD verdict on an ID sample counts as an error.
    """
    labels = getattr(decisions, "label", decisions)
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise ValueError("one ground-truth label per decision required")
    if np.any(truth < 0):
        raise ValueError("ground truth missing for some samples")
    k = n_id_classes
    cm = confusion_counts(labels, truth, k)
    support = cm[:k].sum(axis=1)
    present = support > 0
    acc = np.full(k, np.nan)
    acc[present] = np.diag(cm)[:k][present] / support[present]
    flags = []
    if not present.all():
        flags.append(f"ID classes absent from ground truth: {np.flatnonzero(~present).tolist()}")
    os_star = float(acc[present].mean()) if present.any() else 0.0
    n_ood = cm[k].sum()
    if n_ood == 0:
        flags.append("UNK undefined: no OOD samples in ground truth")
        return MetricsSummary(acc, os_star, float("nan"), 0.0, cm, False, present, flags)
    unk = float(cm[k, k] / n_ood)
    return MetricsSummary(acc, os_star, unk, hos(os_star, unk), cm, True, present, flags)


# --- ablations -------------------------------------------------------------

SUITES = ("loss-removal", "threshold-mode", "sigma-sweep", "delta-sweep", "A-sweep", "uc-loss")


def suite_variants(suite, base):
    """``[(name, TrainConfig), ...]`` for one ablation suite."""
    if suite == "loss-removal":
        return [("full", base),
                ("w/o lpb", replace(base, use_lpb=False)),
                ("w/o pda", replace(base, use_pda=False)),
                ("w/o atg", replace(base, use_atg=False)),
                ("w/o uc", replace(base, use_uc=False))]
    if suite == "threshold-mode":
        return [("fixed", replace(base, threshold_mode="fixed")),
                ("adaptive", replace(base, threshold_mode="adaptive"))]
    if suite == "sigma-sweep":
        return [(f"sigma={s}", replace(base, sigma=s)) for s in (0.8, 0.9, 1.0, 1.1, 1.2)]
    if suite == "delta-sweep":
        return [(f"delta={d}", replace(base, delta=d)) for d in (0.3, 0.4, 0.5, 0.6, 0.7)]
    if suite == "A-sweep":
        return [(f"A={a}K", replace(base, a_factor=a)) for a in (2.3, 2.4, 2.5, 2.6, 2.7)]
    if suite == "uc-loss":
        return [("CE loss", replace(base, uc_mode="ce")), ("KL loss", replace(base, uc_mode="kl"))]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def run_variant(config, source, target):
    from .trainer import train

    state, _ = train(config, source, target.features)
    decisions, _ = state.predict(target.features)
    return evaluate(decisions, target.labels, source.n_classes)


def run_ablation(suite, base_config, seeds, data_fn, progress=None):
    """Train every variant of ``suite`` for every seed.

    ``data_fn(seed)`` returns ``(source, target)``; all variants share the data
    and the training seed for a given seed. Returns a list of rows
    ``{variant, seed, os_star, unk, hos}``.
    """
    rows = []
    variants = suite_variants(suite, base_config)
    for seed in seeds:
        source, target = data_fn(seed)
        for name, cfg in variants:
            t0 = time.perf_counter()
            m = run_variant(replace(cfg, seed=seed), source, target)
            row = {"variant": name, "seed": seed, **m.as_row()}
            rows.append(row)
            log.info("%s seed=%d hos=%.4f (%.1fs)", name, seed, m.hos, time.perf_counter() - t0)
            if progress:
                progress(row)
    return rows


def summarize(rows):
    """Mean and sample standard deviation of HOS per variant, in first-seen order."""
    out = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r["hos"])
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
            for k, v in out.items()}


# --- CSV logs ---------------------------------------------------------------

ABLATION_FIELDS = ["variant", "seed", "os_star", "unk", "hos"]
METRIC_FIELDS = ["epoch", "loss_lpb", "loss_pda", "loss_atg", "loss_uc", "loss_total",
                 "os_star", "unk", "hos"]
SUMMARY_FIELDS = ["variant", "n_seeds", "hos_mean", "hos_std"]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, float("nan"))) for k in fields})
    return path


def write_ablation_csv(path, rows):
    return _write_rows(path, ABLATION_FIELDS, rows)


def write_summary_csv(path, rows):
    """One row per variant with mean and sample std of HOS across seeds."""
    out = [{"variant": k, "n_seeds": n, "hos_mean": m, "hos_std": s}
           for k, (m, s, n) in summarize(rows).items()]
    return _write_rows(path, SUMMARY_FIELDS, out)


def write_metrics_csv(path, rows):
    """Per-epoch log; missing scores (no ground truth) are written as nan."""
    return _write_rows(path, METRIC_FIELDS, rows)


def write_thresholds_csv(path, rows):
    """Per-epoch threshold table, one ``o_c`` column per ID class."""
    k = max((len(r.get("thresholds", [])) for r in rows), default=0)
    fields = ["epoch"] + [f"o_{c}" for c in range(k)]
    flat = [{"epoch": r["epoch"], **{f"o_{c}": v for c, v in enumerate(r.get("thresholds", []))}}
            for r in rows]
    return _write_rows(path, fields, flat)


def write_clusters_csv(path, rows):
    """Per-epoch cluster sizes over the memory bank."""
    a = max((len(r.get("cluster_sizes", [])) for r in rows), default=0)
    fields = ["epoch"] + [f"size_{i}" for i in range(a)]
    flat = [{"epoch": r["epoch"], **{f"size_{i}": v for i, v in enumerate(r.get("cluster_sizes", []))}}
            for r in rows]
    return _write_rows(path, fields, flat)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(METRIC_FIELDS) - set(rows[0]):
        raise ValueError(f"{path}: not a metrics log (expected columns {','.join(METRIC_FIELDS)})")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]
