"""Training loop: composite loss, per-epoch bank/threshold/cluster refresh,
SGD with momentum, checkpoints."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .atg import EQ5_MODES, EQ7_MODES, THRESHOLD_MODES, ThresholdTable, atg_loss, decide
from .data import RecyclingStream, minibatch_iterator, read_checkpoint, write_checkpoint
from .encoder import ACTIVATIONS, Encoder, SGDMomentum
from .lpb import InvalidState, PrototypeBank, lpb_loss, normalize_grad, renormalize_prototypes
from .numeric import l2_normalize, softmax_temperature
from .pda import PDA_NORMS, MemoryBank, pda_loss
from .uc import UC_MODES, UC_NORMS, ClusterSet, assign_cluster, kmeans, n_clusters, pair_weights, uc_loss

log = logging.getLogger(__name__)

COMPONENTS = ("lpb", "pda", "atg", "uc")

# named random streams derived from the experiment seed
STREAM_INIT, STREAM_SOURCE, STREAM_TARGET, STREAM_KMEANS = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.05
    lambda2: float = 0.1
    lambda3: float = 0.1
    sigma: float = 0.05
    alpha: float = 0.15
    delta: float = 0.5
    a_factor: float = 2.5
    source_batch: int = 32
    target_batch: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    seed: int = 0
    use_lpb: bool = True
    use_pda: bool = True
    use_atg: bool = True
    use_uc: bool = True
    threshold_mode: str = "adaptive"
    eq5_mode: str = "corrected"
    eq7_mode: str = "repel"
    uc_mode: str = "kl"
    pda_norm: str = "literal"
    uc_norm: str = "batch"
    warmup_epochs: int = 2
    hidden: tuple = (32,)
    feature_dim: int = 16
    activation: str = "relu"
    freeze_encoder: bool = False
    encoder_lr_scale: float = 1.0

    def validate(self):
        for name in ("sigma", "learning_rate", "a_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda1", "lambda2", "lambda3", "alpha", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.source_batch < 1 or self.target_batch < 1 or self.epochs < 0:
            raise ValueError("batch sizes must be >= 1 and epochs >= 0")
        for name, allowed in (("threshold_mode", THRESHOLD_MODES), ("eq5_mode", EQ5_MODES),
                              ("eq7_mode", EQ7_MODES), ("uc_mode", UC_MODES),
                              ("pda_norm", PDA_NORMS), ("uc_norm", UC_NORMS),
                              ("activation", ACTIVATIONS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        return self

    def weights(self):
        return {
            "lpb": 1.0 if self.use_lpb else 0.0,
            "pda": self.lambda1 if self.use_pda else 0.0,
            "atg": self.lambda2 if self.use_atg else 0.0,
            "uc": self.lambda3 if self.use_uc else 0.0,
        }

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return cls(**kw)


@dataclass
class TrainState:
    encoder: Encoder
    protos: PrototypeBank
    bank: MemoryBank
    optimizer: SGDMomentum
    config: TrainConfig
    thresholds: ThresholdTable = None
    clusters: ClusterSet = None
    epoch: int = 0
    source_stream: RecyclingStream = None
    target_stream: RecyclingStream = None
    extra: dict = field(default_factory=dict)

    @property
    def M(self):
        return self.protos.M

    def params(self):
        return self.encoder.params() + [self.protos.M]

    def embed(self, x):
        """Unit-norm features for raw inputs."""
        return l2_normalize(self.encoder(np.asarray(x, float)))

    def posteriors(self, x):
        return softmax_temperature(self.embed(x) @ self.M, self.config.sigma)

    def refresh(self, target_x, epoch=None):
        """Full target pass: refill the bank, recompute thresholds and clusters."""
        cfg = self.config
        feats = self.embed(target_x)
        self.bank.fill(feats)
        post = softmax_temperature(feats @ self.M, cfg.sigma)
        self.thresholds = ThresholdTable.from_posteriors(post, cfg.alpha, cfg.threshold_mode, cfg.eq5_mode)
        epoch = self.epoch if epoch is None else epoch
        A = n_clusters(self.M.shape[1], cfg.a_factor)
        if len(feats) >= A:
            self.clusters = kmeans(self.bank.Z, A, seed=[cfg.seed, STREAM_KMEANS, epoch])
        return post

    def predict(self, target_x):
        """Decisions for every target sample using thresholds from the same pass."""
        cfg = self.config
        post = self.posteriors(target_x)
        table = ThresholdTable.from_posteriors(post, cfg.alpha, cfg.threshold_mode, cfg.eq5_mode)
        return decide(post, table.o), table


def init_state(config, in_dim, n_classes, n_target):
    cfg = config.validate()
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    if cfg.hidden is None or (len(cfg.hidden) == 0 and cfg.feature_dim == in_dim):
        sizes = [in_dim]
    else:
        sizes = [in_dim, *cfg.hidden, cfg.feature_dim]
    encoder = Encoder(sizes, cfg.activation, rng)
    protos = PrototypeBank.random(encoder.out_dim, n_classes, cfg.sigma, rng)
    bank = MemoryBank(n_target, encoder.out_dim)
    state = TrainState(encoder, protos, bank, None, cfg)
    state.optimizer = SGDMomentum(state.params(), cfg.learning_rate, cfg.momentum)
    return state


def batch_pair_weights(state, features):
    """Pair weights for unit-norm target features from their current verdicts
    and cluster indices."""
    post = softmax_temperature(features @ state.M, state.config.sigma)
    dec = decide(post, state.thresholds.o)
    return pair_weights(dec.label, dec.confidence, assign_cluster(state.clusters, features))


def total_loss(state, xs, ys, xt, t_idx, active=None, uc_weights=None):
    """Composite loss ``L_lpb + l1 L_pda + l2 L_atg + l3 L_uc`` on one pair of
    batches. Components with zero weight are skipped and report 0.

    The clustering pair weights are constants of the gradient; by default
    they come from the batch's current verdicts, or ``uc_weights`` (B, B)
    pins them (used to check gradients with the weights frozen).

    Returns ``(total, parts, grads)`` with ``grads`` aligned to
    ``state.params()``.
    """
    cfg = state.config
    w = cfg.weights()
    if active is not None:
        w = {k: (v if k in active else 0.0) for k, v in w.items()}
    if (w["atg"] > 0 or w["uc"] > 0) and state.thresholds is None:
        raise InvalidState("thresholds not computed; call refresh() first")
    if w["uc"] > 0 and state.clusters is None:
        raise InvalidState("clusters not computed; call refresh() first")
    if w["pda"] > 0 and not state.bank.initialized.any():
        raise InvalidState("memory bank is empty; call refresh() first")
    M, sigma = state.M, cfg.sigma
    enc = state.encoder

    fs_raw, cache_s = enc.forward(xs)
    ft_raw, cache_t = enc.forward(xt)
    fs, ft = l2_normalize(fs_raw), l2_normalize(ft_raw)
    gs = np.zeros_like(fs)
    gt = np.zeros_like(ft)
    gM = np.zeros_like(M)
    parts = dict.fromkeys(COMPONENTS, 0.0)

    if w["lpb"] > 0:
        parts["lpb"], gx, gm = lpb_loss(M, fs, ys, sigma)
        gs += w["lpb"] * gx
        gM += w["lpb"] * gm
    if w["pda"] > 0:
        parts["pda"], gx, gm = pda_loss(state.bank, M, t_idx, ft, sigma, cfg.pda_norm)
        gt += w["pda"] * gx
        gM += w["pda"] * gm
    if w["atg"] > 0:
        parts["atg"], gx, gm = atg_loss(ft, M, sigma, state.thresholds.o, cfg.delta, cfg.eq7_mode)
        gt += w["atg"] * gx
        gM += w["atg"] * gm
    if w["uc"] > 0:
        W = batch_pair_weights(state, ft) if uc_weights is None else uc_weights
        parts["uc"], gx, gm = uc_loss(ft, M, sigma, W, cfg.uc_mode, cfg.uc_norm)
        gt += w["uc"] * gx
        gM += w["uc"] * gm

    for name, value in parts.items():
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite {name} loss ({value})")
    total = sum(w[k] * parts[k] for k in COMPONENTS)

    grads = [np.zeros_like(p) for p in enc.params()]
    if not enc.is_identity and not cfg.freeze_encoder:
        g1, _ = enc.backward(cache_s, normalize_grad(fs_raw, fs, gs))
        g2, _ = enc.backward(cache_t, normalize_grad(ft_raw, ft, gt))
        scale = cfg.encoder_lr_scale
        grads = [scale * (a + b) for a, b in zip(g1, g2)]
    return total, parts, grads + [gM]


def _active_components(cfg, epoch):
    if epoch <= cfg.warmup_epochs:
        return ("lpb", "pda")
    return COMPONENTS


def train_epoch(state, source, target_x, on_step=None):
    cfg = state.config
    state.epoch += 1
    epoch = state.epoch
    state.refresh(target_x, epoch)
    n_iter = max(math.ceil(len(source) / cfg.source_batch), math.ceil(len(target_x) / cfg.target_batch))
    active = _active_components(cfg, epoch)
    sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
    xs_all, ys_all = np.asarray(source.features, float), source.labels
    params = state.params()
    for _ in range(n_iter):
        s_idx = state.source_stream.next()
        t_idx = state.target_stream.next()
        xt = target_x[t_idx]
        total, parts, grads = total_loss(state, xs_all[s_idx], ys_all[s_idx], xt, t_idx, active)
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite total loss at epoch {epoch}")
        ft = state.embed(xt)  # pre-step features of this batch go to the bank
        state.optimizer.step(params, grads)
        state.protos.M[...] = renormalize_prototypes(state.protos.M)
        state.bank.update(t_idx, ft)
        if on_step is not None:
            on_step(state)
        for k in COMPONENTS:
            sums[k] += parts[k]
        sums["total"] += total
    return {f"loss_{k}": v / n_iter for k, v in sums.items()}


def train(config, source, target_x, monitor=None, state=None, on_step=None):
    """Train on a labeled source set and unlabeled target features.

    ``monitor(state, decisions)``, if given, is called after every epoch with
    fresh decisions for the whole target set and may return extra metric
    columns (e.g. OS*/UNK/HOS computed from held-back labels). Every row also
    carries the epoch's threshold table and cluster sizes. ``on_step(state)``
    runs after every optimizer step.

    Returns ``(state, log_rows)``.
    """
    target_x = np.asarray(target_x, float)
    if state is None:
        state = init_state(config, source.dim, source.n_classes, len(target_x))
    cfg = state.config
    if state.source_stream is None:
        state.source_stream = RecyclingStream(len(source), cfg.source_batch, cfg.seed * 1000003 + STREAM_SOURCE)
        state.target_stream = RecyclingStream(len(target_x), cfg.target_batch, cfg.seed * 1000003 + STREAM_TARGET)
    rows = []
    while state.epoch < cfg.epochs:
        row = {"epoch": state.epoch + 1}
        row.update(train_epoch(state, source, target_x, on_step))
        row["thresholds"] = state.thresholds.o.tolist()
        if state.clusters is not None:
            sizes = np.bincount(assign_cluster(state.clusters, state.bank.Z), minlength=state.clusters.A)
            row["cluster_sizes"] = sizes.tolist()
        if monitor is not None:
            decisions, _ = state.predict(target_x)
            row.update(monitor(state, decisions) or {})
        log.debug("epoch %d: %s", row["epoch"], row)
        rows.append(row)
    return state, rows


# --- checkpoints ------------------------------------------------------------

def _stream_meta(stream):
    if stream is None:
        return None
    return [stream.n, stream.batch_size, stream.seed, stream.cycle, len(stream._pending)]


def _stream_from_meta(m):
    if m is None:
        return None
    n, batch, seed, cycle, pending = m
    stream = RecyclingStream(n, batch, seed, cycle)
    if pending:
        stream._pending = minibatch_iterator(n, batch, seed, cycle - 1)[-pending:]
    return stream


def save_state(path, state):
    t = {"protos": state.M, "bank_Z": state.bank.Z,
         "bank_init": state.bank.initialized.astype(np.int32),
         "bank_staleness": state.bank.staleness}
    for i, p in enumerate(state.encoder.params()):
        t[f"encoder_{i:02d}"] = p
    for i, v in enumerate(state.optimizer.velocity):
        t[f"velocity_{i:02d}"] = v
    if state.clusters is not None:
        t["clusters"] = state.clusters.centers
    if state.thresholds is not None:
        t["threshold_T"] = state.thresholds.T
        t["threshold_o"] = state.thresholds.o
    meta = {
        "version": __version__,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "layer_sizes": state.encoder.layer_sizes,
        "activation": state.encoder.activation,
        "source_stream": _stream_meta(state.source_stream),
        "target_stream": _stream_meta(state.target_stream),
    }
    write_checkpoint(path, t, meta)


def load_state(path):
    t, meta = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    enc = Encoder(meta["layer_sizes"], meta["activation"])
    n_enc = 2 * (len(meta["layer_sizes"]) - 1)
    enc.set_params([t[f"encoder_{i:02d}"] for i in range(n_enc)])
    protos = PrototypeBank(t["protos"].astype(float), cfg.sigma)
    bank = MemoryBank(*t["bank_Z"].shape)
    bank.Z[...] = t["bank_Z"]
    bank.initialized[...] = t["bank_init"].astype(bool)
    bank.staleness[...] = t["bank_staleness"]
    state = TrainState(enc, protos, bank, None, cfg, epoch=meta["epoch"])
    state.optimizer = SGDMomentum(state.params(), cfg.learning_rate, cfg.momentum)
    for i, v in enumerate(state.optimizer.velocity):
        v[...] = t[f"velocity_{i:02d}"]
    if "clusters" in t:
        state.clusters = ClusterSet(t["clusters"])
    if "threshold_o" in t:
        T = t["threshold_T"]
        state.thresholds = ThresholdTable(T, t["threshold_o"], cfg.alpha, np.isfinite(T))
    state.source_stream = _stream_from_meta(meta.get("source_stream"))
    state.target_stream = _stream_from_meta(meta.get("target_stream"))
    state.extra["meta"] = meta
    return state
