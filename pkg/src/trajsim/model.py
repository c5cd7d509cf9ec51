"""The trajectory encoder: a convolutional sub-view front-end (SVEnc)
followed by a single pre-norm attention block (TrajEnc).

SVEnc: linear 7->d, three blocks of [valid Conv1D(k=3, s=1) d->d,
masked batch norm, LeakyReLU], linear d->d. Each valid convolution
shortens the sequence by 2, so n points become m = n - 6 sub-view
embeddings.

TrajEnc: X + MHSA(RMSNorm(X)), then + SwiGLU-FFN(RMSNorm(.)), then
masked average pooling. Attention applies rotary position embedding to
queries and keys, uses no causal mask and no head sharing, and the
block may be stacked (default depth 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .geo import FEATURE_DIM, augment_features, normalize_features


def _ffn_hidden(d):
    # 8d/3 rounded to the nearest multiple of 8
    return max(8, int(round(8 * d / 3 / 8)) * 8)


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 8
    layers: int = 1
    conv_kernel: int = 3
    conv_stride: int = 1
    leaky_slope: float = 0.01
    rope_base: float = 10000.0
    ffn_hidden: int = 0  # 0 -> derived from d

    def __post_init__(self):
        if self.ffn_hidden == 0:
            self.ffn_hidden = _ffn_hidden(self.d)
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if (self.d // self.heads) % 2 != 0:
            raise ValueError(f"head dim {self.d // self.heads} must be even for rotary pairing")
        if self.layers < 1:
            raise ValueError("need at least one attention layer")
        if self.conv_stride != 1:
            raise ValueError("only stride-1 convolutions are supported")

    @property
    def head_dim(self):
        return self.d // self.heads

    @property
    def attn_scale(self):
        return 1.0 / np.sqrt(self.head_dim)

    # receptive-field shrink of the three valid convolutions
    @property
    def length_shrink(self):
        return 3 * (self.conv_kernel - 1)

    def min_points(self):
        return self.length_shrink + 1


class Model:
    """Parameter bundle plus the preprocessing state needed at inference."""

    def __init__(self, config, params, bn_states, norm_stats=None, scale=None, ref_lat=0.0):
        self.config = config
        self.params = params          # name -> Parameter
        self.bn_states = bn_states    # name -> BatchNormState
        self.norm_stats = norm_stats
        self.scale = scale
        self.ref_lat = ref_lat

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = {}
        bn_states = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = Parameter(name, rng.uniform(-bound, bound, size=shape).astype(dtype))

        def zeros(name, shape):
            params[name] = Parameter(name, np.zeros(shape, dtype=dtype))

        def ones(name, shape):
            params[name] = Parameter(name, np.ones(shape, dtype=dtype))

        d, k = config.d, config.conv_kernel
        # layers feeding a batch norm carry no bias: the normalization
        # subtracts it exactly, leaving a dead parameter
        uniform("svenc.lin_in.w", (FEATURE_DIM, d), FEATURE_DIM)
        for i in (1, 2, 3):
            uniform(f"svenc.conv{i}.w", (k, d, d), k * d)
            ones(f"svenc.bn{i}.gamma", (d,))
            zeros(f"svenc.bn{i}.beta", (d,))
            bn_states[f"svenc.bn{i}"] = BatchNormState(d, dtype=dtype)
        uniform("svenc.lin_out.w", (d, d), d)
        zeros("svenc.lin_out.b", (d,))

        hd, f = config.head_dim, config.ffn_hidden
        for layer in range(config.layers):
            p = f"layer{layer}"
            for j in range(config.heads):
                uniform(f"{p}.attn.wq{j}", (d, hd), d)
                uniform(f"{p}.attn.wk{j}", (d, hd), d)
                uniform(f"{p}.attn.wv{j}", (d, hd), d)
            uniform(f"{p}.attn.wo", (d, d), d)
            ones(f"{p}.norm1.gain", (d,))
            ones(f"{p}.norm2.gain", (d,))
            uniform(f"{p}.ffn.w_gate", (d, f), d)
            uniform(f"{p}.ffn.w_up", (d, f), d)
            uniform(f"{p}.ffn.w_down", (f, d), f)
        return cls(config, params, bn_states)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def param_list(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self):
        return ({k: p.data.copy() for k, p in self.params.items()},
                {k: s.copy() for k, s in self.bn_states.items()})

    def restore(self, snap):
        data, states = snap
        for k, p in self.params.items():
            p.data = data[k].copy()
        for k in self.bn_states:
            self.bn_states[k] = states[k].copy()

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for s in self.bn_states.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return self


def trajenc_param_count(config):
    """Closed form for the attention-block parameters of one layer."""
    d, h, f = config.d, config.heads, config.ffn_hidden
    return h * 3 * d * (d // h) + d * d + 2 * d + 3 * d * f


def pad_batch(features_list, dtype=np.float32):
    """Stack variable-length (n_i, 7) features into (B, n_max, 7) + mask."""
    n_max = max(len(f) for f in features_list)
    batch = np.zeros((len(features_list), n_max, FEATURE_DIM), dtype=dtype)
    mask = np.zeros((len(features_list), n_max), dtype=bool)
    for i, f in enumerate(features_list):
        batch[i, :len(f)] = f
        mask[i, :len(f)] = True
    return batch, mask


def svenc_forward(features, mask, model, training=False):
    """(B, n_max, 7) -> sub-view embeddings (B, m_max, d) plus their mask."""
    cfg = model.config
    p = model.params
    lengths = mask.sum(axis=1)
    if np.any(lengths < cfg.min_points()):
        raise ValueError(f"svenc needs at least {cfg.min_points()} points per trajectory")
    x = features if isinstance(features, Tensor) else Tensor(features)
    h = ad.matmul(x, p["svenc.lin_in.w"])
    cur_mask = np.asarray(mask, dtype=bool)
    for i in (1, 2, 3):
        h = ad.conv1d_valid(h, p[f"svenc.conv{i}.w"])
        cur_mask = cur_mask[:, cfg.conv_kernel - 1:]  # window touching padding -> invalid
        h = ad.batch_norm_1d_masked(h, p[f"svenc.bn{i}.gamma"], p[f"svenc.bn{i}.beta"],
                                    cur_mask, model.bn_states[f"svenc.bn{i}"], training)
        h = ad.leaky_relu(h, cfg.leaky_slope)
    h = ad.add(ad.matmul(h, p["svenc.lin_out.w"]), p["svenc.lin_out.b"])
    return h, cur_mask


def mhsa_forward(xn, mask, model, layer=0, rope=True, position_offset=0):
    """Multi-head self-attention over RMS-normalized input ``xn``.

    Rotary embedding rotates Q and K before the scaled dot product;
    padded keys are masked out of the softmax. No causal mask: every
    sub-view attends to the whole trajectory. ``position_offset`` shifts
    all rotary positions; outputs are invariant to it by construction.
    """
    cfg = model.config
    p = model.params
    prefix = f"layer{layer}.attn"
    L = xn.shape[1]
    positions = np.arange(L) + position_offset
    key_mask = np.asarray(mask, dtype=bool)[:, None, :]  # (B, 1, L)
    heads = []
    for j in range(cfg.heads):
        q = ad.matmul(xn, p[f"{prefix}.wq{j}"])
        k = ad.matmul(xn, p[f"{prefix}.wk{j}"])
        v = ad.matmul(xn, p[f"{prefix}.wv{j}"])
        if rope:
            q = ad.rope_rotate(q, positions, cfg.rope_base)
            k = ad.rope_rotate(k, positions, cfg.rope_base)
        scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), cfg.attn_scale)
        attn = ad.softmax_masked(scores, key_mask)
        heads.append(ad.matmul(attn, v))
    concat = heads[0] if len(heads) == 1 else ad.concat_last(heads)
    return ad.matmul(concat, p[f"{prefix}.wo"])


def _ffn_swiglu(xn, model, layer):
    p = model.params
    prefix = f"layer{layer}.ffn"
    gate = ad.silu(ad.matmul(xn, p[f"{prefix}.w_gate"]))
    up = ad.matmul(xn, p[f"{prefix}.w_up"])
    return ad.matmul(ad.mul(gate, up), p[f"{prefix}.w_down"])


def trajenc_forward(x, mask, model, rope=True):
    """Pre-norm attention block(s) and masked average pooling -> (B, d)."""
    p = model.params
    for layer in range(model.config.layers):
        attn = mhsa_forward(ad.rms_norm(x, p[f"layer{layer}.norm1.gain"]), mask, model,
                            layer=layer, rope=rope)
        x = ad.add(x, attn)
        ffn = _ffn_swiglu(ad.rms_norm(x, p[f"layer{layer}.norm2.gain"]), model, layer)
        x = ad.add(x, ffn)
    return ad.mean_valid(x, mask)


def model_forward(features, mask, model, training=False, rope=True):
    """Full encoder: features (B, n_max, 7) -> embeddings (B, d)."""
    x, sub_mask = svenc_forward(features, mask, model, training=training)
    return trajenc_forward(x, sub_mask, model, rope=rope)


def _prepared_features(traj, model):
    if model.norm_stats is None:
        raise ValueError("model has no normalization stats; train or load a checkpoint first")
    return normalize_features(augment_features(traj), model.norm_stats)


def encode(traj, model, stats=None):
    """Eval-mode embedding of one cleaned trajectory."""
    if stats is not None:
        feats = normalize_features(augment_features(traj), stats)
    else:
        feats = _prepared_features(traj, model)
    batch, mask = pad_batch([feats], dtype=model.dtype)
    out = model_forward(batch, mask, model, training=False)
    return out.data[0].copy()


def encode_batch(trajs, model, batch_size=128):
    """Eval-mode embeddings (len(trajs), d) in input order."""
    out = np.empty((len(trajs), model.config.d), dtype=model.dtype)
    for start in range(0, len(trajs), batch_size):
        chunk = trajs[start:start + batch_size]
        feats = [_prepared_features(t, model) for t in chunk]
        batch, mask = pad_batch(feats, dtype=model.dtype)
        out[start:start + len(chunk)] = model_forward(batch, mask, model, training=False).data
    return out
