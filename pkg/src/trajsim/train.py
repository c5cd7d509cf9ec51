"""Adam training loop with step-decay learning rate, early stopping on
validation HR@10, and binary checkpoint persistence."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter
from .errors import FormatError, NumericError, VersionError
from .evaluation import metrics_from_rankings, rankings_from_embeddings, rankings_from_matrix
from .geo import NormStats, augment_features, normalize_features
from .loss import LossConfig, combined_loss
from .measures import SimilarityScale
from .model import Model, ModelConfig, model_forward, pad_batch

CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1

MIN_BATCH = 4  # the ranking loss degenerates below this; smaller tail batches are dropped


@dataclass
class TrainConfig:
    lr: float = 0.002
    decay_factor: float = 0.5
    decay_every: int = 15          # epochs between decays
    max_epochs: int = 40
    batch_size: int = 128
    patience: int = 10
    lam: float = 0.2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    include_n_scale: bool = True
    exclude_self: bool = True

    def __post_init__(self):
        for name in ("lr", "decay_factor", "decay_every", "max_epochs", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def loss_config(self):
        return LossConfig(lam=self.lam, include_n_scale=self.include_n_scale,
                          exclude_self=self.exclude_self)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)   # one entry per epoch
    val_hr10: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def log_lines(self):
        return [f"{e}\t{l:.6f}\t{h:.6f}"
                for e, (l, h) in enumerate(zip(self.train_loss, self.val_hr10))]


class AdamState:
    """Per-parameter first/second moments plus the global step count."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; parameters without grads are skipped."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} ({p.name})")
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch, cfg):
    """Step decay: lr0 * factor^floor(epoch / every), epochs 0-based."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def _validation_hr10(model, val_feats, gt_val):
    batch, mask = pad_batch(val_feats, dtype=model.dtype)
    emb = model_forward(batch, mask, model, training=False).data
    pred = rankings_from_embeddings(emb, emb)
    gt = rankings_from_matrix(gt_val.values)
    report = metrics_from_rankings(gt, pred)
    if report.hr10 is None:
        raise ValueError("validation set too small for HR@10")
    return report.hr10


def fit(train_trajs, val_trajs, gt_train, gt_val, model, cfg, log=None):
    """Train ``model`` in place; returns a TrainReport.

    Ground-truth matrices must align with the given trajectory lists.
    The model keeps the best-validation weights when training ends.
    """
    if gt_train.n != len(train_trajs):
        raise ValueError(f"gt_train covers {gt_train.n} trajectories, got {len(train_trajs)}")
    if gt_val.n != len(val_trajs):
        raise ValueError(f"gt_val covers {gt_val.n} trajectories, got {len(val_trajs)}")

    stats = NormStats.from_features([augment_features(t) for t in train_trajs])
    model.norm_stats = stats
    train_feats = [normalize_features(augment_features(t), stats) for t in train_trajs]
    val_feats = [normalize_features(augment_features(t), stats) for t in val_trajs]

    loss_cfg = cfg.loss_config()
    params = model.param_list()
    opt = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    best_hr10 = -np.inf
    best_snap = None

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_trajs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < MIN_BATCH:
                continue
            batch, mask = pad_batch([train_feats[i] for i in idx], dtype=model.dtype)
            emb = model_forward(batch, mask, model, training=True)
            y_sub = gt_train.values[np.ix_(idx, idx)]
            loss = combined_loss(emb, y_sub, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch} "
                                   f"(batch starting at {start}): {value}")
            model.zero_grads()
            ad.backward(loss)
            adam_step(params, opt, lr, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(value)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        hr10 = _validation_hr10(model, val_feats, gt_val)
        report.train_loss.append(epoch_loss)
        report.val_hr10.append(hr10)
        if log:
            log(f"{epoch}\t{epoch_loss:.6f}\t{hr10:.6f}")
        if hr10 > best_hr10:
            best_hr10 = hr10
            report.best_epoch = epoch
            best_snap = model.snapshot()
        if epoch - report.best_epoch >= cfg.patience:
            report.stop_reason = "early_stop"
            break
    else:
        report.stop_reason = "max_epochs"

    if best_snap is not None:
        model.restore(best_snap)
    return report


# ---------------------------------------------------------------------------
# Checkpoint format (little-endian):
#   magic 'TSCK', u32 version,
#   config: u32 d, heads, layers, conv_kernel, conv_stride, ffn_hidden;
#           f64 leaky_slope, rope_base,
#   f64 ref_lat,
#   u8 has_stats [+ 7 f64 means, 7 f64 stds],
#   u8 has_scale [+ f64 scale],
#   u32 blob count, then per blob: u32 name length, name bytes,
#   u32 ndim, ndim * u32 shape, float32 data.
# Blobs hold both parameters and batch-norm running statistics.


def _write_blob(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated (wanted {n} bytes, got {len(buf)})")
    return buf


def _read_blob(fh, path):
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
    name = _read_exact(fh, name_len, path).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
    size = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * size, path), dtype="<f4").reshape(shape).copy()
    return name, data


def save_checkpoint(model, path):
    """Persist a float32 model; see the format comment above."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<6I", cfg.d, cfg.heads, cfg.layers,
                             cfg.conv_kernel, cfg.conv_stride, cfg.ffn_hidden))
        fh.write(struct.pack("<2d", cfg.leaky_slope, cfg.rope_base))
        fh.write(struct.pack("<d", model.ref_lat))
        if model.norm_stats is not None:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<7d", *model.norm_stats.mean))
            fh.write(struct.pack("<7d", *model.norm_stats.std))
        else:
            fh.write(struct.pack("<B", 0))
        if model.scale is not None:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<d", model.scale.s))
        else:
            fh.write(struct.pack("<B", 0))
        blobs = [(name, p.data) for name, p in sorted(model.params.items())]
        for name, state in sorted(model.bn_states.items()):
            blobs.append((f"{name}.running_mean", state.running_mean))
            blobs.append((f"{name}.running_var", state.running_var))
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            _write_blob(fh, name, arr)


def load_checkpoint(path):
    """Rebuild a float32 model from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CKPT_VERSION:
            raise VersionError(f"{path}: unsupported version {version}, expected {CKPT_VERSION}")
        d, heads, layers, kernel, stride, ffn = struct.unpack("<6I", _read_exact(fh, 24, path))
        slope, rope_base = struct.unpack("<2d", _read_exact(fh, 16, path))
        (ref_lat,) = struct.unpack("<d", _read_exact(fh, 8, path))
        config = ModelConfig(d=d, heads=heads, layers=layers, conv_kernel=kernel,
                             conv_stride=stride, leaky_slope=slope, rope_base=rope_base,
                             ffn_hidden=ffn)
        stats = None
        if struct.unpack("<B", _read_exact(fh, 1, path))[0]:
            mean = np.array(struct.unpack("<7d", _read_exact(fh, 56, path)))
            std = np.array(struct.unpack("<7d", _read_exact(fh, 56, path)))
            stats = NormStats(mean=mean, std=std)
        scale = None
        if struct.unpack("<B", _read_exact(fh, 1, path))[0]:
            scale = SimilarityScale(s=struct.unpack("<d", _read_exact(fh, 8, path))[0])
        (n_blobs,) = struct.unpack("<I", _read_exact(fh, 4, path))
        blobs = dict(_read_blob(fh, path) for _ in range(n_blobs))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last blob")

    reference = Model.init(config, seed=0, dtype=np.float32)
    params = {}
    for name, ref in reference.params.items():
        if name not in blobs:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if blobs[name].shape != ref.data.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {blobs[name].shape}, "
                              f"expected {ref.data.shape}")
        params[name] = Parameter(name, blobs[name])
    bn_states = {}
    for name in reference.bn_states:
        state = BatchNormState(config.d, dtype=np.float32)
        try:
            state.running_mean = blobs[f"{name}.running_mean"]
            state.running_var = blobs[f"{name}.running_var"]
        except KeyError as missing:
            raise FormatError(f"{path}: missing batch-norm blob {missing}") from None
        bn_states[name] = state
    return Model(config, params, bn_states, norm_stats=stats, scale=scale, ref_lat=ref_lat)
