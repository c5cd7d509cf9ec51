"""Reverse-mode automatic differentiation on dense numpy arrays.

Deliberately small: exactly the operations the encoder and the ranking
losses need, each with a hand-written backward rule. Graphs are built
eagerly; ``backward`` walks the graph in reverse topological order and
accumulates gradients into every tensor that requires them.

float64 graphs are used for finite-difference verification, float32 for
training. A graph belongs to one thread; distinct graphs may run
concurrently.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

LN2 = math.log(2.0)


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        if self.data.ndim > 4:
            raise ValueError(f"tensors support at most 4 axes, got {self.data.ndim}")
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that takes part in optimization."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward_fn = bw
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, parents=(a, b))

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward_fn = bw
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward_fn = bw
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c, parents=(a,))

    def bw(g):
        _accumulate(a, g * c)

    out._backward_fn = bw
    return out


def matmul(a, b):
    """Matrix product; leading axes broadcast per numpy matmul rules."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires at least 2 axes on both sides")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    out._backward_fn = bw
    return out


def concat_last(tensors):
    """Concatenate along the last axis."""
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1), parents=tuple(tensors))
    widths = [t.data.shape[-1] for t in tensors]

    def bw(g):
        offset = 0
        for t, w in zip(tensors, widths):
            _accumulate(t, g[..., offset:offset + w])
            offset += w

    out._backward_fn = bw
    return out


def tslice(a, key):
    """Basic (non-repeating) slice of a tensor."""
    out = Tensor(a.data[key], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    out._backward_fn = bw
    return out


def gather(a, idx, axis=0):
    """Take elements along ``axis``; repeated indices sum in backward."""
    idx = np.asarray(idx)
    out = Tensor(np.take(a.data, idx, axis=axis), parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            sl = [slice(None)] * full.ndim
            sl[axis] = idx
            np.add.at(full, tuple(sl), g)
        _accumulate(a, full)

    out._backward_fn = bw
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    out._backward_fn = bw
    return out


def transpose_last(a):
    out = Tensor(np.swapaxes(a.data, -1, -2), parents=(a,))

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    out._backward_fn = bw
    return out


def texp(a):
    out = Tensor(np.exp(a.data), parents=(a,))

    def bw(g):
        _accumulate(a, g * out.data)

    out._backward_fn = bw
    return out


def tlog2(a):
    out = Tensor(np.log2(a.data), parents=(a,))

    def bw(g):
        _accumulate(a, g / (a.data * LN2))

    out._backward_fn = bw
    return out


def _sigmoid(x):
    # Overflow-free on both tails.
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    z[~pos] = e / (1.0 + e)
    return z


def sigmoid(a):
    s = _sigmoid(np.asarray(a.data, dtype=a.data.dtype))
    out = Tensor(s, parents=(a,))

    def bw(g):
        _accumulate(a, g * s * (1.0 - s))

    out._backward_fn = bw
    return out


def log2_sigmoid(a):
    """log2(sigmoid(x)) computed without underflow on large margins."""
    x = a.data
    out_data = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x)))) / LN2
    out = Tensor(out_data, parents=(a,))
    s = _sigmoid(x)

    def bw(g):
        _accumulate(a, g * (1.0 - s) / LN2)

    out._backward_fn = bw
    return out


def leaky_relu(a, negative_slope=0.01):
    x = a.data
    out = Tensor(np.where(x > 0, x, negative_slope * x), parents=(a,))

    def bw(g):
        _accumulate(a, g * np.where(x > 0, 1.0, negative_slope))

    out._backward_fn = bw
    return out


def silu(a):
    x = a.data
    s = _sigmoid(x)
    out = Tensor(x * s, parents=(a,))

    def bw(g):
        _accumulate(a, g * (s + x * s * (1.0 - s)))

    out._backward_fn = bw
    return out


def tsqrt(a):
    """Square root with the backward clamped near zero (subgradient at 0)."""
    out = Tensor(np.sqrt(a.data), parents=(a,))

    def bw(g):
        _accumulate(a, g * 0.5 / np.maximum(out.data, 1e-12))

    out._backward_fn = bw
    return out


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if axis is None:
            full = np.broadcast_to(g, a.data.shape)
        elif keepdims:
            full = np.broadcast_to(g, a.data.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
        _accumulate(a, np.ascontiguousarray(full))

    out._backward_fn = bw
    return out


def cast(a, dtype):
    out = Tensor(a.data.astype(dtype), parents=(a,))

    def bw(g):
        _accumulate(a, g.astype(a.data.dtype))

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# Masked / sequence ops


def softmax_masked(a, mask):
    """Softmax over the last axis restricted to ``mask`` (True = valid).

    Masked positions get probability 0. ``mask`` must broadcast to
    ``a.shape``; a row with no valid entries yields all zeros.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    neg = np.where(m, a.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(neg - mx), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    s = e / np.maximum(denom, np.finfo(a.data.dtype).tiny)
    out = Tensor(s, parents=(a,))

    def bw(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (g - inner))

    out._backward_fn = bw
    return out


def mean_valid(a, mask):
    """Mean of ``a`` (B, L, D) over valid positions of ``mask`` (B, L)."""
    m = np.asarray(mask, dtype=bool)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("mean_valid: a batch row has no valid positions")
    w = (m / counts[:, None]).astype(a.data.dtype)
    out = Tensor(np.einsum("bld,bl->bd", a.data, w), parents=(a,))

    def bw(g):
        _accumulate(a, g[:, None, :] * w[:, :, None])

    out._backward_fn = bw
    return out


def conv1d_valid(x, w, b=None):
    """1-D convolution along axis 1, no padding, stride 1.

    x: (B, L, Cin), w: (K, Cin, Cout), b: (Cout) or None -> (B, L-K+1, Cout).
    """
    K = w.data.shape[0]
    L = x.data.shape[1]
    if L < K:
        raise ValueError(f"conv1d_valid: input length {L} shorter than kernel {K}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=1)  # (B, L', Cin, K)
    out_data = np.einsum("blck,kco->blo", windows, w.data)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out_data = out_data + b.data
    out = Tensor(out_data, parents=parents)
    Lp = out_data.shape[1]

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w.data)
        for k in range(K):
            gx[:, k:k + Lp, :] += g @ w.data[k].T
            gw[k] = np.einsum("blc,blo->co", x.data[:, k:k + Lp, :], g)
        _accumulate(x, gx)
        _accumulate(w, gw)
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 1)))

    out._backward_fn = bw
    return out


class BatchNormState:
    """Running statistics for one masked batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self):
        s = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batch_norm_1d_masked(x, gamma, beta, mask, state, training, momentum=0.1, eps=1e-5):
    """Per-channel batch norm over valid positions of a padded batch.

    x: (B, L, C), mask: (B, L). Train mode normalizes with statistics of
    the valid positions only and updates ``state`` in place; eval mode
    uses the running statistics. Padded positions come out as zeros.
    """
    m = np.asarray(mask, dtype=bool)
    mf = m.astype(x.data.dtype)
    count = mf.sum()
    if training:
        if count < 2:
            raise ValueError("batch_norm_1d_masked: need at least 2 valid positions in train mode")
        mean = np.einsum("blc,bl->c", x.data, mf) / count
        centered = x.data - mean
        var = np.einsum("blc,bl->c", centered * centered, mf) / count
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mean).astype(state.running_mean.dtype)
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
        centered = x.data - mean
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = (gamma.data * xhat + beta.data) * mf[:, :, None]
    out = Tensor(out_data, parents=(x, gamma, beta))

    def bw(g):
        gm = g * mf[:, :, None]
        _accumulate(gamma, np.einsum("blc->c", gm * xhat))
        _accumulate(beta, np.einsum("blc->c", gm))
        gxhat = gm * gamma.data
        if training:
            sum_g = np.einsum("blc->c", gxhat)
            sum_gx = np.einsum("blc->c", gxhat * xhat)
            gx = inv * (gxhat - (sum_g + xhat * sum_gx) / count) * mf[:, :, None]
        else:
            gx = gxhat * inv * mf[:, :, None]
        _accumulate(x, gx)

    out._backward_fn = bw
    return out


def rms_norm(x, gain, eps=1e-6):
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    d = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = Tensor(xhat * gain.data, parents=(x, gain))

    def bw(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        gxhat = g * gain.data
        inner = np.sum(gxhat * x.data, axis=-1, keepdims=True)
        _accumulate(x, inv * gxhat - (inv ** 3 / d) * x.data * inner)

    out._backward_fn = bw
    return out


def rope_rotate(x, positions, base=10000.0):
    """Rotary position embedding on the last axis.

    x: (..., L, D) with D even; coordinate pairs (2t, 2t+1) are rotated
    by ``pos * base**(-2t/D)`` where pos is taken from ``positions`` (L,).
    """
    D = x.data.shape[-1]
    if D % 2 != 0:
        raise ValueError(f"rope_rotate needs an even last axis, got {D}")
    positions = np.asarray(positions, dtype=x.data.dtype)
    t = np.arange(D // 2, dtype=x.data.dtype)
    theta = base ** (-2.0 * t / D)
    ang = positions[:, None] * theta[None, :]  # (L, D/2)
    cos, sin = np.cos(ang), np.sin(ang)
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = x0 * cos - x1 * sin
    out_data[..., 1::2] = x0 * sin + x1 * cos
    out = Tensor(out_data, parents=(x,))

    def bw(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(x.data)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        _accumulate(x, gx)

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(f, params, h=1e-5, max_coords=64, rng=None):
    """Max relative error between backward() and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built
    from ``params`` (float64). At most ``max_coords`` coordinates are
    probed per parameter. Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
    zero_grads(params)
    out = f()
    backward(out)
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    zero_grads(params)
    worst = 0.0
    for p in params:
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f().data)
            flat[c] = orig - h
            fm = float(f().data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[id(p)].reshape(-1)[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def check_finite(t, what="value"):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite {what} encountered")
    return t
