"""Datasets, the class-imbalanced domain-shifted synthetic generator, feature
file I/O and seeded mini-batch iteration.

Class indices are 0-based everywhere: source classes are ``0..K_s-1``,
target OOD classes ``K_s..K_s+K_t-1``, and ``-1`` marks an unlabeled row.
"""

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_MAGIC = b"CCOD"
CKPT_MAGIC = b"CKPT"
FORMAT_VERSION = 1
UNLABELED = -1


class ParseError(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class SourceDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be (N, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("source label out of range")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class TargetDataset:
    """Unlabeled target samples. ``labels`` is ground truth for evaluation only;
    the trainer receives ``features`` and never reads it."""

    features: np.ndarray
    labels: np.ndarray = None
    n_id_classes: int = 0
    n_ood_classes: int = 0

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def has_labels(self):
        return self.labels is not None and bool(np.any(self.labels != UNLABELED))


@dataclass
class SynthConfig:
    n_id_classes: int = 5
    n_ood_classes: int = 3
    raw_dim: int = 8
    n_max: int = 200
    n_target: int = 2000
    mu: float = 10.0
    radius: float = 5.0
    class_sigma: float = 1.0
    rotation_deg: float = 15.0
    translation: float = 1.0
    noise_sigma: float = 0.2
    seed: int = 0

    def validate(self):
        if self.n_id_classes < 1 or self.n_ood_classes < 0:
            raise InvalidConfig("class counts must be positive")
        if self.n_id_classes == 1 and self.mu > 1:
            raise InvalidConfig("geometric profile undefined for one source class with mu > 1")
        if self.mu < 1:
            raise InvalidConfig(f"imbalance factor must be >= 1, got {self.mu}")
        if self.raw_dim < 2:
            raise InvalidConfig("raw_dim must be at least 2")
        if self.n_max < 1 or self.n_target < 1:
            raise InvalidConfig("sizes must be positive")
        n_min = round(self.n_max / self.mu)
        if n_min < 1:
            raise InvalidConfig("n_max / mu rounds to an empty class")


def geometric_profile(n_max, mu, k):
    """Class sizes ``round(n_max * mu ** (-i / (k - 1)))`` for ``i = 0..k-1``."""
    if k == 1:
        if mu > 1:
            raise InvalidConfig("geometric profile undefined for k = 1 with mu > 1")
        return np.array([n_max])
    i = np.arange(k)
    return np.array([int(round(n_max * mu ** (-j / (k - 1)))) for j in i])


def _split_total(total, weights):
    # largest-remainder rounding so sizes sum exactly to total
    raw = total * np.asarray(weights, float) / np.sum(weights)
    sizes = np.floor(raw).astype(int)
    rem = total - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes


def class_means(cfg, rng):
    k = cfg.n_id_classes + cfg.n_ood_classes
    slots = rng.permutation(k)
    angles = 2 * np.pi * slots / k
    means = np.zeros((k, cfg.raw_dim))
    means[:, 0] = cfg.radius * np.cos(angles)
    means[:, 1] = cfg.radius * np.sin(angles)
    return means


def domain_shift(x, cfg, rng):
    """Rotate the first two coordinates, translate along a random direction,
    then add isotropic noise."""
    t = np.deg2rad(cfg.rotation_deg)
    out = np.array(x, dtype=float)
    c, s = np.cos(t), np.sin(t)
    x0, x1 = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    direction = rng.normal(size=cfg.raw_dim)
    direction /= np.linalg.norm(direction)
    out += cfg.translation * direction
    if cfg.noise_sigma > 0:
        out += rng.normal(scale=cfg.noise_sigma, size=out.shape)
    return out


def generate_synthetic_ccod(cfg):
    """Draw a source set over the first ``K_s`` Gaussians and a shifted target
    set over all ``K_s + K_t`` Gaussians, each with a geometric imbalance
    profile. Features are float32 so they round-trip through the files."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0xDA7A])
    k_s, k_t = cfg.n_id_classes, cfg.n_ood_classes
    means = class_means(cfg, rng)

    src_sizes = geometric_profile(cfg.n_max, cfg.mu, k_s)
    xs = [means[c] + cfg.class_sigma * rng.normal(size=(n, cfg.raw_dim))
          for c, n in enumerate(src_sizes)]
    ys = [np.full(n, c) for c, n in enumerate(src_sizes)]
    xs, ys = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(len(xs))
    source = SourceDataset(xs[perm].astype(np.float32), ys[perm].astype(np.int64), k_s)

    k = k_s + k_t
    ranks = rng.permutation(k)  # independent of the source ordering
    weights = cfg.mu ** (-ranks / max(k - 1, 1))
    tgt_sizes = _split_total(cfg.n_target, weights)
    xt = [means[c] + cfg.class_sigma * rng.normal(size=(n, cfg.raw_dim))
          for c, n in enumerate(tgt_sizes)]
    yt = [np.full(n, c) for c, n in enumerate(tgt_sizes)]
    xt, yt = np.concatenate(xt), np.concatenate(yt)
    xt = domain_shift(xt, cfg, rng)
    perm = rng.permutation(len(xt))
    target = TargetDataset(xt[perm].astype(np.float32), yt[perm].astype(np.int64), k_s, k_t)
    return source, target


# --- feature files ---------------------------------------------------------

def _check_finite(features, origin):
    bad = np.argwhere(~np.isfinite(features))
    if len(bad):
        r, c = bad[0]
        # same numbering as the CSV reader: data rows from 1, column 0 = label
        raise ParseError(f"{origin}: row {r + 1}, column {c + 1}: non-finite value")


def write_csv(path, features, labels=None):
    features = np.asarray(features, dtype=np.float32)
    n, d = features.shape if features.ndim == 2 else (0, 0)
    if labels is None:
        labels = np.full(n, UNLABELED)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["label"] + [f"f{j}" for j in range(d)]) + "\n")
        for lab, row in zip(labels, features):
            fh.write(",".join([str(int(lab))] + ["%.9g" % v for v in row]) + "\n")


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        if not header or header[0] != "label":
            raise ParseError(f"{path}: header must start with 'label'")
        d = len(header) - 1
        for j, name in enumerate(header[1:]):
            if name != f"f{j}":
                raise ParseError(f"{path}: bad header column {j + 1}: {name!r}")
        feats, labels = [], []
        for r, row in enumerate(reader, start=1):
            if len(row) != d + 1:
                raise ParseError(f"{path}: row {r} has {len(row) - 1} features, expected {d}")
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise ParseError(f"{path}: row {r}, column 0: bad label {row[0]!r}")
            vals = []
            for c, tok in enumerate(row[1:], start=1):
                try:
                    v = float(tok)
                except ValueError:
                    raise ParseError(f"{path}: row {r}, column {c}: bad value {tok!r}")
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {r}, column {c}: non-finite value")
                vals.append(v)
            feats.append(vals)
    features = np.array(feats, dtype=np.float32).reshape(len(feats), d)
    return features, np.array(labels, dtype=np.int64)


_HEADER = struct.Struct("<4sIQIB")


def write_binary(path, features, labels=None):
    features = np.ascontiguousarray(features, dtype="<f4")
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, FORMAT_VERSION, n, d, labels is not None))
        fh.write(features.tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def read_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, n, d, has_labels = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    need = off + 4 * n * d + (4 * n if has_labels else 0)
    if len(raw) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(raw)}")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    features = features.astype(np.float32)
    _check_finite(features, path)
    off += 4 * n * d
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    else:
        labels = np.full(n, UNLABELED, dtype=np.int64)
    return features, labels


def _format_of(path, fmt):
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "bin"
    if fmt not in ("csv", "bin"):
        raise ValueError(f"unknown format {fmt!r}")
    return fmt


def save_features(path, features, labels=None, fmt=None):
    if _format_of(path, fmt) == "csv":
        write_csv(path, features, labels)
    else:
        write_binary(path, features, labels)


def load_features(path, fmt=None, role="target", n_id_classes=None, expect_dim=None):
    """Read a feature file as a :class:`SourceDataset` or :class:`TargetDataset`.

    Source files must be fully labeled. ``n_id_classes`` defaults to
    ``max(label) + 1`` for source files.
    """
    if _format_of(path, fmt) == "csv":
        features, labels = read_csv(path)
    else:
        features, labels = read_binary(path)
    if expect_dim is not None and len(features) and features.shape[1] != expect_dim:
        raise ParseError(f"{path}: dimension {features.shape[1]} != expected {expect_dim}")
    if role == "source":
        unl = np.flatnonzero(labels == UNLABELED)
        if len(unl):
            raise ParseError(f"{path}: row {unl[0] + 1}, column 0: source rows must be labeled")
        k = n_id_classes if n_id_classes is not None else int(labels.max(initial=-1)) + 1
        bad = np.flatnonzero((labels < 0) | (labels >= k))
        if len(bad):
            raise ParseError(f"{path}: row {bad[0] + 1}, column 0: label out of range")
        return SourceDataset(features, labels, k)
    k = n_id_classes or 0
    k_t = 0
    if k and np.any(labels >= k):
        k_t = len(np.unique(labels[labels >= k]))
    return TargetDataset(features, labels, k, k_t)


# --- checkpoint container --------------------------------------------------

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
          np.dtype("int32"): 2, np.dtype("int64"): 3}


def write_checkpoint(path, tensors, meta=None):
    """Named little-endian tensors behind the ``CKPT`` magic, plus a JSON
    metadata blob. Arrays are stored at their own precision."""
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<4sIIQ", CKPT_MAGIC, FORMAT_VERSION, len(tensors), len(meta_bytes)))
    buf.write(meta_bytes)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    magic, version, count, meta_len = struct.unpack_from("<4sIIQ", raw)
    if magic != CKPT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    off = struct.calcsize("<4sIIQ")
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dt = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
    return tensors, meta


# --- batching --------------------------------------------------------------

def minibatch_iterator(n, batch_size, seed, epoch):
    """Index batches of a seeded permutation; a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class RecyclingStream:
    """Endless batch stream that reshuffles with a fresh (seed, cycle) key each
    time it runs out."""

    n: int
    batch_size: int
    seed: int
    cycle: int = 0
    _pending: list = field(default_factory=list, repr=False)

    def next(self):
        if not self._pending:
            self._pending = minibatch_iterator(self.n, self.batch_size, self.seed, self.cycle)
            self.cycle += 1
        return self._pending.pop(0)
