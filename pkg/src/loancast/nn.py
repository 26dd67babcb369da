"""Layers used by both branches of the network.

Functional ops take and return :class:`~loancast.tensor.Tensor`; the small
``Module`` classes own parameters and running statistics and expose them by
stable dotted names. 2-D convolution and pooling reuse the 3-D kernels with a
unit depth axis.
"""
import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor, _op, as_tensor, matmul_1x1conv

# columns of the im2col matrix are built for at most this many samples at once
CONV_CHUNK = 16
# forward column matrices up to this many bytes are kept for the backward pass
# instead of being rebuilt
COLS_CACHE_BYTES = 256 * 2**20


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    return tuple(int(i) for i in v)


def _conv_out_shape(in_shape, ksize, stride, padding):
    out = []
    for size, k, s, p in zip(in_shape, ksize, stride, padding):
        o = (size + 2 * p - k) // s + 1
        if o < 1 or size + 2 * p < k:
            raise DimensionError(f"kernel {ksize} does not fit input extent {tuple(in_shape)} with padding {padding}")
        out.append(o)
    return tuple(out)


def conv3d(x, weight, bias=None, stride=1, padding=1):
    """Cross-correlation of ``N x C x D x H x W`` input with ``K x C x kd x kh x kw`` weights."""
    xd, w = x.data, weight.data
    if xd.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and weight, got {xd.shape} and {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {xd.shape[1]} channels, weight expects {w.shape[1]}")
    stride, padding = _triple(stride), _triple(padding)
    ksize = w.shape[2:]
    do, ho, wo = _conv_out_shape(xd.shape[2:], ksize, stride, padding)
    n, k = xd.shape[0], w.shape[0]
    pd, ph, pw = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else xd
    wmat = w.reshape(k, -1)
    out = np.empty((n, k, do * ho * wo), dtype=xd.dtype)
    need_grad = x.requires_grad or weight.requires_grad
    keep = need_grad and n * wmat.shape[1] * do * ho * wo * xd.itemsize <= COLS_CACHE_BYTES
    cached = []
    for s in range(0, n, CONV_CHUNK):
        cols = _kernels.im2col(xp[s:s + CONV_CHUNK], ksize, stride)
        np.matmul(wmat, cols, out=out[s:s + CONV_CHUNK])
        if keep:
            cached.append(cols)
    del cols
    out = out.reshape(n, k, do, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, k, 1, 1, 1)

    def bw(g):
        g3 = g.reshape(n, k, -1)
        dw = np.zeros_like(wmat)
        dxp = np.empty_like(xp) if x.requires_grad else None
        for ci, s in enumerate(range(0, n, CONV_CHUNK)):
            cols = cached[ci] if keep else _kernels.im2col(xp[s:s + CONV_CHUNK], ksize, stride)
            gs = g3[s:s + CONV_CHUNK]
            for i in range(gs.shape[0]):
                dw += gs[i] @ cols[i].T
            if dxp is not None:
                dxp[s:s + CONV_CHUNK] = _kernels.col2im(np.matmul(wmat.T, gs), xp[s:s + CONV_CHUNK].shape, ksize, stride)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, pd:pd + xd.shape[2], ph:ph + xd.shape[3], pw:pw + xd.shape[4]]
        grads = (dx, dw.reshape(w.shape))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, parents, bw)


def _add_depth(t):
    s = t.shape
    return t.reshape(s[:2] + (1,) + s[2:])


def _drop_depth(t):
    s = t.shape
    return t.reshape(s[:2] + s[3:])


def conv2d(x, weight, bias=None, stride=1, padding=1):
    """Cross-correlation of ``N x C x H x W`` input with ``K x C x kh x kw`` weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    stride = (1,) + tuple(_triple(stride)[:2]) if not np.isscalar(stride) else (1, stride, stride)
    padding = (0,) + tuple(_triple(padding)[:2]) if not np.isscalar(padding) else (0, padding, padding)
    y = conv3d(_add_depth(x), _add_depth(weight), bias, stride=stride, padding=padding)
    return _drop_depth(y)


def maxpool3d(x, window, stride=None):
    """Max over windows of ``x`` (``N x C x D x H x W``); ties route gradient to the first index."""
    xd = x.data
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if xd.ndim != 5:
        raise DimensionError(f"maxpool3d expects 5-D input, got {xd.shape}")
    _conv_out_shape(xd.shape[2:], window, stride, (0, 0, 0))
    out, idx = _kernels.maxpool_fwd(xd, window, stride)
    overlapping = any(s < k for s, k in zip(stride, window))
    return _op(out, (x,), lambda g: (_kernels.maxpool_bwd(np.ascontiguousarray(g), idx, xd.shape, overlapping),))


def maxpool2d(x, window, stride=None):
    window = (1,) + (tuple(window) if not np.isscalar(window) else (window, window))
    stride = window if stride is None else (1,) + (tuple(stride) if not np.isscalar(stride) else (stride, stride))
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    return _drop_depth(maxpool3d(_add_depth(x), window, stride))


def relu(x):
    xd = x.data
    mask = xd > 0
    return _op(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def softmax(x, axis=1):
    xd = x.data
    if xd.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def global_avg_pool(x):
    """Average over every axis after the channel axis: ``N x K x ... -> N x K``."""
    if x.ndim < 3 or any(s == 0 for s in x.shape[2:]):
        raise DimensionError(f"global_avg_pool needs non-empty spatial axes, got {x.shape}")
    return x.mean(axis=tuple(range(2, x.ndim)))


def channel_normalize(x, mean=None, var=None, eps=1e-5, std_eps=False):
    """Normalize each channel (axis 1) over all other axes.

    With ``mean``/``var`` given the statistics are treated as constants (eval
    mode). ``std_eps`` selects the denominator: ``sqrt(var) + eps`` when true,
    ``sqrt(var + eps)`` otherwise. Returns ``(y, batch_mean, batch_var)``;
    the batch statistics are ``None`` in eval mode.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    if mean is not None:
        mu = np.asarray(mean, dtype=xd.dtype).reshape(bshape)
        sigma = np.sqrt(np.asarray(var, dtype=xd.dtype)).reshape(bshape)
        s = sigma + eps if std_eps else np.sqrt(np.asarray(var, dtype=xd.dtype).reshape(bshape) + eps)
        return _op((xd - mu) / s, (x,), lambda g: (g / s,)), None, None

    count = xd.size // xd.shape[1]
    if count == 0:
        raise ContractError("cannot compute batch statistics of an empty batch")
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var_b = (xc * xc).mean(axis=axes, keepdims=True)
    sigma = np.sqrt(var_b)
    if std_eps:
        s = sigma + eps
        c = sigma
    else:
        s = np.sqrt(var_b + eps)
        c = s
    y = xc / s

    def bw(g):
        proj = (g * xc).sum(axis=axes, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(c > 0, proj / (count * s * s * c), 0).astype(xd.dtype)
        dxc = g / s - xc * coef
        return (dxc - dxc.mean(axis=axes, keepdims=True),)

    return _op(y, (x,), bw), mu.reshape(-1), var_b.reshape(-1)


def batch_norm(x, state, training):
    """Batch normalization with the statistics and affine terms held in ``state``."""
    if x.shape[1] != state.num_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, batch norm expects {state.num_channels}")
    y = state.normalize(x, training)
    if state.affine:
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        y = y * state.weight.reshape(bshape) + state.bias.reshape(bshape)
    return y


def dropout(x, p, training, rng):
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _op(x.data * mask, (x,), lambda g: (g * mask,))


BCE_EPS = 1e-7


def bce_loss(probs, labels):
    """Mean binary cross-entropy of positive-class probabilities.

    ``probs`` is ``N``, ``N x 1`` or ``N x 2`` (column 1 taken as the positive
    class). Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    p = probs
    if p.ndim == 2:
        if p.shape[1] == 2:
            p = p[:, 1]
        elif p.shape[1] == 1:
            p = p.reshape(-1)
        else:
            raise DimensionError(f"expected N x 1 or N x 2 probabilities, got {p.shape}")
    pd = p.data
    if pd.shape != labels.shape:
        raise DimensionError(f"{pd.shape[0]} probabilities for {labels.shape} labels")
    n = pd.size
    y = labels.astype(pd.dtype)
    pc = np.clip(pd, BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    inside = (pd >= BCE_EPS) & (pd <= 1 - BCE_EPS)

    def bw(g):
        return (g * inside * -(y / pc - (1 - y) / (1 - pc)) / n,)

    return _op(np.asarray(loss, dtype=pd.dtype), (p,), bw)


def resize_nearest(x, size):
    """Nearest-neighbour down-sampling of the last two axes to ``size``.

    Output cell ``i`` reads source cell ``floor((i + 0.5) * src / dst)``.
    """
    h_in, w_in = x.shape[-2:]
    h_out, w_out = size
    if h_out > h_in or w_out > w_in:
        raise ContractError(f"nearest resize only down-samples: {(h_in, w_in)} -> {(h_out, w_out)}")
    if (h_out, w_out) == (h_in, w_in):
        return x
    rows = np.floor((np.arange(h_out) + 0.5) * h_in / h_out).astype(np.int64)
    cols = np.floor((np.arange(w_out) + 0.5) * w_in / w_out).astype(np.int64)
    return x[(Ellipsis,) + np.ix_(rows, cols)]


# --------------------------------------------------------------- modules

class Module:
    """Minimal parameter container with train/eval switching."""

    training = True

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def _own_params(self):
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Tensor) and v.requires_grad]

    def _own_buffers(self):
        return []

    def named_parameters(self, prefix=""):
        for k, v in self._own_params():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for k, v in self._own_buffers():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_uniform(rng, shape, dtype, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Module):
    """2-D or 3-D same-padded convolution.

    ``bias=False`` is used where a normalization follows directly, since a
    per-channel offset is removed by the mean subtraction anyway.
    """

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32, padding=None, stride=1, bias=True):
        self.kernel = tuple(kernel)
        if len(self.kernel) not in (2, 3):
            raise ContractError("kernel must have 2 or 3 extents")
        self.padding = tuple(k // 2 for k in self.kernel) if padding is None else tuple(padding)
        self.stride = stride
        shape = (out_channels, in_channels) + self.kernel
        self.weight = Tensor(fan_in_uniform(rng, shape, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        if len(self.kernel) == 3:
            return conv3d(x, self.weight, self.bias, self.stride, self.padding)
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """Kernel-size-1 convolution over a feature vector."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Tensor(fan_in_uniform(rng, (out_features, in_features), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return matmul_1x1conv(x, self.weight, self.bias)


class RunningStats(Module):
    """Per-channel running mean/variance, momentum-updated from batch statistics.

    Running variance uses the unbiased batch estimate. Evaluating before any
    update raises unless :meth:`init_stats` has been called.
    """

    def __init__(self, num_channels, eps=1e-5, momentum=0.1, std_eps=False, dtype=np.float32):
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.std_eps = std_eps
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.num_updates = np.zeros(1, dtype=np.int64)
        self.stats_ready = False

    def _own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var), ("num_updates", self.num_updates)]

    def init_stats(self):
        self.stats_ready = True

    def normalize(self, x, training):
        if training:
            y, mu, var = channel_normalize(x, eps=self.eps, std_eps=self.std_eps)
            count = x.size // x.shape[1]
            unbiased = var * (count / max(count - 1, 1))
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased
            self.num_updates += 1
            return y
        if not self.stats_ready and self.num_updates[0] == 0:
            raise ContractError("running statistics are uninitialized; run a training batch or call init_stats()")
        y, _, _ = channel_normalize(x, self.running_mean, self.running_var, eps=self.eps, std_eps=self.std_eps)
        return y


class BatchNorm(RunningStats):
    def __init__(self, num_channels, affine=True, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__(num_channels, eps=eps, momentum=momentum, dtype=dtype)
        self.affine = affine
        if affine:
            self.weight = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return batch_norm(x, self, self.training)


__all__ = [
    "conv2d", "conv3d", "maxpool2d", "maxpool3d", "relu", "softmax", "global_avg_pool",
    "channel_normalize", "batch_norm", "dropout", "bce_loss", "resize_nearest",
    "Module", "Conv", "Linear", "BatchNorm", "RunningStats", "as_tensor",
]
