"""Two-branch 2D/3D CNN with LOAN and day-of-year encoding, and the one-branch 3D baseline.

Block ``i`` of the dynamic branch is ``conv3d -> [batch norm] -> [LOAN] -> ReLU
-> maxpool``; the static branch mirrors it with 2-D layers. Batch norm sits in
block 1 of each branch only. When LOAN modulates block 1 the dynamic batch norm
has no affine terms of its own. The activation-conditioned LOAN reads the
post-ReLU, pre-pool static activation of the same block.

Checkpoint layout (all integers little-endian)::

    b"LOAN" | u16 version
    u32 count, then per parameter:  u16 len | name utf-8 | u8 ndim | u32 * ndim shape | float32 data
    u32 count, then per statistic:  u16 len | name utf-8 | u8 dtype (0=f32, 1=i64) | u8 ndim | u32 * ndim shape | data
    u32 len | config text (utf-8): a [model] section plus optional extra sections
"""
import dataclasses
import io
import os
import struct
from typing import NamedTuple

import numpy as np

from . import config as cfgtext
from .errors import ContractError, DimensionError, FormatError
from .loan import LOAN
from .nn import (
    BatchNorm, Conv, Linear, Module, dropout, global_avg_pool, maxpool2d, maxpool3d, relu, softmax,
)
from .temporal import TemporalEncoding
from .tensor import Tensor, concat

ARCHS = ("two-branch", "one-branch-3d")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    arch: str = "two-branch"
    dyn_vars: int = 10
    static_vars: int = 15
    time_steps: int = 10
    patch: int = 25
    dyn_channels: tuple = (16, 32, 256)
    static_channels: tuple = (16, 32, 128)
    kernel_depth: int = 3
    dyn_pools: tuple = ((1, 2, 2), (1, 2, 2), (2, 2, 2))
    static_pools: tuple = ((2, 2), (2, 2), (2, 2))
    loan_blocks: tuple = (1, 2)
    loan_variant: str = "activation"
    te: bool = True
    te_base: float = 10.0
    dropout: float = 0.5
    head_dims: tuple = (256, 128, 32, 2)
    masked_static: tuple = ()
    seed: int = 0

    def validate(self):
        if self.arch not in ARCHS:
            raise ContractError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.loan_variant not in ("activation", "variable"):
            raise ContractError(f"unknown LOAN variant {self.loan_variant!r}")
        if len(self.dyn_channels) != 3 or len(self.static_channels) != 3:
            raise ContractError("each branch has exactly three blocks")
        if len(self.dyn_pools) != 3 or len(self.static_pools) != 3:
            raise ContractError("one pooling window per block is required")
        if any(b not in (1, 2, 3) for b in self.loan_blocks):
            raise ContractError(f"LOAN blocks must be in 1..3, got {self.loan_blocks}")
        if self.kernel_depth not in (1, 3):
            raise ContractError("kernel_depth must be 1 or 3")
        if self.head_dims[-1] != 2:
            raise ContractError("classifier must end in 2 outputs")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")
        if self.te and self.dyn_channels[-1] != 256:
            raise ContractError("temporal encoding needs a 256-d dynamic feature vector")
        if any(not 0 <= v < self.static_vars for v in self.masked_static):
            raise ContractError("masked_static indices out of range")
        if self.arch == "one-branch-3d" and self.loan_blocks:
            raise ContractError("the one-branch baseline has no LOAN layers; set loan_blocks = none")
        self._check_extents()
        return self

    def _check_extents(self):
        d, h = self.time_steps, self.patch
        for i, (kd, kh, kw) in enumerate(self.dyn_pools):
            if kd > d or kh > h or kw > h:
                raise DimensionError(f"dynamic pool {i + 1} window {(kd, kh, kw)} exceeds extent {(d, h, h)}")
            d, h = d // kd, h // kh
        h = self.patch
        for i, (kh, kw) in enumerate(self.static_pools):
            if kh > h:
                raise DimensionError(f"static pool {i + 1} window {(kh, kw)} exceeds extent {(h, h)}")
            h = h // kh

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


def tiny_config(**overrides):
    """Small config for gradient checks: widths 2/3, 5x5 patch, 3 time steps."""
    base = ModelConfig(
        dyn_vars=2, static_vars=2, time_steps=3, patch=5,
        dyn_channels=(2, 3, 256), static_channels=(2, 3, 4),
        dyn_pools=((1, 2, 2), (1, 2, 2), (1, 1, 1)), static_pools=((2, 2), (2, 2), (1, 1)),
        head_dims=(8, 6, 4, 2),
    )
    return base.replace(**overrides).validate()


def _as_input(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


class Classifier(Module):
    """Kernel-size-1 layers with ReLU between them and dropout after the first two."""

    def __init__(self, in_dim, dims, p, rng, dtype):
        self.layers = []
        prev = in_dim
        for d in dims:
            self.layers.append(Linear(prev, d, rng, dtype))
            prev = d
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = relu(x)
                if i < 2:
                    x = dropout(x, self.p, self.training, self.rng)
        return softmax(x, axis=1)


class _Net(Module):
    """Shared pieces: dtype handling, input checks, naming and counting."""

    def __init__(self, cfg, dtype):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(dtype)

    def reseed(self, seed):
        """Reset the dropout generator (makes train-mode forwards repeatable)."""
        self.head.rng = np.random.default_rng(seed)

    def _check_inputs(self, dyn, stat, tau):
        c = self.cfg
        want_d = (c.dyn_vars, c.time_steps, c.patch, c.patch)
        want_s = (c.static_vars, c.patch, c.patch)
        if tuple(dyn.shape[1:]) != want_d:
            raise DimensionError(f"dynamic input {tuple(dyn.shape)} does not match config N x {want_d}")
        if tuple(stat.shape[1:]) != want_s:
            raise DimensionError(f"static input {tuple(stat.shape)} does not match config N x {want_s}")
        if stat.shape[0] != dyn.shape[0] or (tau is not None and len(tau) != dyn.shape[0]):
            raise DimensionError("dynamic, static and day inputs disagree on batch size")

    def _mask_static(self, stat):
        if not self.cfg.masked_static:
            return stat
        keep = np.ones((1, self.cfg.static_vars, 1, 1), dtype=self.dtype)
        keep[0, list(self.cfg.masked_static)] = 0
        return stat * keep

    def forward(self, dyn, stat, tau):
        return self.head(self.features(dyn, stat, tau))

    def init_stats(self):
        for _, m in self._modules():
            if m is not self and hasattr(m, "init_stats"):
                m.init_stats()

    def _modules(self, prefix=""):
        yield prefix, self
        stack = [(prefix, self)]
        while stack:
            p, m = stack.pop()
            for name, child in m.children():
                yield p + name, child
                stack.append((p + name + ".", child))

    def state_dict(self):
        return dict(self.named_parameters()), dict(self.named_buffers())

    def load_state_dict(self, params, buffers):
        own_p, own_b = self.state_dict()
        if set(params) != set(own_p) or set(buffers) != set(own_b):
            missing = (set(own_p) | set(own_b)) ^ (set(params) | set(buffers))
            raise ContractError(f"state does not match model; differing names: {sorted(missing)[:5]}")
        for k, v in params.items():
            if own_p[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {own_p[k].shape}")
        for k, v in buffers.items():
            if own_b[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {own_b[k].shape}")
        for k, v in params.items():
            own_p[k].data[...] = v
        for k, v in buffers.items():
            own_b[k][...] = v
        for _, m in self._modules():
            if hasattr(m, "num_updates") and m.num_updates[0] > 0:
                m.stats_ready = True


class TwoBranchCNN(_Net):
    def __init__(self, cfg=None, dtype=np.float32):
        super().__init__(cfg or ModelConfig(), dtype)
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        kd = c.kernel_depth
        self.dyn_convs, self.static_convs = [], []
        prev_d, prev_s = c.dyn_vars, c.static_vars
        for i in range(3):
            # block-1 convs feed a batch norm and carry no bias
            self.dyn_convs.append(Conv(prev_d, c.dyn_channels[i], (kd, 3, 3), rng, dtype, bias=i > 0))
            self.static_convs.append(Conv(prev_s, c.static_channels[i], (3, 3), rng, dtype, bias=i > 0))
            prev_d, prev_s = c.dyn_channels[i], c.static_channels[i]
        self.dyn_bn = BatchNorm(c.dyn_channels[0], affine=1 not in c.loan_blocks, dtype=dtype)
        self.static_bn = BatchNorm(c.static_channels[0], dtype=dtype)
        self.loans = []
        self.loan_index = {}
        for b in sorted(c.loan_blocks):
            cond = c.static_channels[b - 1] if c.loan_variant == "activation" else c.static_vars
            self.loan_index[b] = len(self.loans)
            self.loans.append(LOAN(c.dyn_channels[b - 1], cond, rng, c.loan_variant, dtype))
        self.te = TemporalEncoding(c.dyn_channels[-1], c.te_base, dtype) if c.te else None
        self.head = Classifier(c.dyn_channels[-1] + c.static_channels[-1], c.head_dims, c.dropout, rng, dtype)
        self.head.rng = np.random.default_rng(c.seed + 1)

    def features(self, dyn, stat, tau):
        """Concatenated ``(X_d + W * X_tau) || X_s`` vector fed to the classifier."""
        self._check_inputs(dyn, stat, tau)
        c = self.cfg
        d = _as_input(dyn, self.dtype)
        stat_in = self._mask_static(_as_input(stat, self.dtype))
        s = stat_in
        for i in range(3):
            s_act = self.static_convs[i](s)
            if i == 0:
                s_act = self.static_bn(s_act)
            s_act = relu(s_act)
            z = self.dyn_convs[i](d)
            if i == 0:
                z = self.dyn_bn(z)
            if i + 1 in self.loan_index:
                cond = s_act if c.loan_variant == "activation" else stat_in
                z = self.loans[self.loan_index[i + 1]](z, cond)
            z = relu(z)
            d = maxpool3d(z, c.dyn_pools[i])
            s = maxpool2d(s_act, c.static_pools[i])
        x_d = global_avg_pool(d)
        x_s = global_avg_pool(s)
        if self.te is not None:
            x_d = self.te(x_d, tau)
        return concat([x_d, x_s], axis=1)


def assemble_one_branch_cube(dyn, stat):
    """Repeat static variables along time and stack them after the dynamic ones."""
    dyn = np.asarray(dyn)
    stat = np.asarray(stat)
    t = dyn.shape[2]
    rep = np.broadcast_to(stat[:, :, None], stat.shape[:2] + (t,) + stat.shape[2:])
    return np.concatenate([dyn, rep], axis=1)


class OneBranch3DCNN(_Net):
    """Single 3-D stack over dynamic variables plus time-duplicated static ones."""

    def __init__(self, cfg=None, dtype=np.float32):
        cfg = cfg or ModelConfig(arch="one-branch-3d", loan_blocks=())
        super().__init__(cfg, dtype)
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        self.convs = []
        prev = c.dyn_vars + c.static_vars
        for i in range(3):
            self.convs.append(Conv(prev, c.dyn_channels[i], (c.kernel_depth, 3, 3), rng, dtype, bias=i > 0))
            prev = c.dyn_channels[i]
        self.bn = BatchNorm(c.dyn_channels[0], dtype=dtype)
        self.te = TemporalEncoding(c.dyn_channels[-1], c.te_base, dtype) if c.te else None
        self.head = Classifier(c.dyn_channels[-1], c.head_dims, c.dropout, rng, dtype)
        self.head.rng = np.random.default_rng(c.seed + 1)

    def forward_one_branch(self, cube, tau=None):
        c = self.cfg
        want = (c.dyn_vars + c.static_vars, c.time_steps, c.patch, c.patch)
        if tuple(cube.shape[1:]) != want:
            raise DimensionError(f"cube {tuple(cube.shape)} does not match config N x {want}")
        x = _as_input(cube, self.dtype)
        for i in range(3):
            x = self.convs[i](x)
            if i == 0:
                x = self.bn(x)
            x = maxpool3d(relu(x), c.dyn_pools[i])
        feats = global_avg_pool(x)
        if self.te is not None:
            feats = self.te(feats, tau)
        return self.head(feats)

    def features(self, dyn, stat, tau):
        raise NotImplementedError("use forward_one_branch")

    def forward(self, dyn, stat, tau):
        self._check_inputs(dyn, stat, tau)
        stat = np.asarray(stat.data if isinstance(stat, Tensor) else stat)
        if self.cfg.masked_static:
            stat = stat.copy()
            stat[:, list(self.cfg.masked_static)] = 0
        dyn = np.asarray(dyn.data if isinstance(dyn, Tensor) else dyn)
        return self.forward_one_branch(assemble_one_branch_cube(dyn, stat), tau)


def build_model(cfg=None, dtype=np.float32):
    cfg = cfg or ModelConfig()
    cls = TwoBranchCNN if cfg.arch == "two-branch" else OneBranch3DCNN
    return cls(cfg, dtype)


def param_count(model):
    return int(sum(p.size for p in model.parameters()))


def param_breakdown(model):
    """Trainable element counts grouped by top-level component."""
    groups = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.size
    return groups


# ------------------------------------------------------------- checkpoints

MAGIC = b"LOAN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


def _write_record(buf, name, arr, with_dtype):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    if with_dtype:
        buf.write(struct.pack("<B", _CODES[arr.dtype]))
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


class Checkpoint(NamedTuple):
    cfg: "ModelConfig"
    params: dict
    buffers: dict
    sections: dict


def dump_state(model, extra=None):
    """Checkpoint bytes; ``extra`` maps section names to ``{key: text}`` stored after ``[model]``."""
    if model.dtype != np.float32:
        raise ContractError("checkpoints store float32 parameters; convert the model first")
    params, buffers = model.state_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_record(buf, name, p.data, False)
    buf.write(struct.pack("<I", len(buffers)))
    for name, b in buffers.items():
        _write_record(buf, name, b, True)
    text = cfgtext.dumps({"model": model.cfg})
    for section, items in (extra or {}).items():
        text += f"[{section}]\n" + "".join(f"{k} = {v}\n" for k, v in items.items()) + "\n"
    text = text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    return buf.getvalue()


def save_state(model, path, extra=None):
    data = dump_state(model, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _read_record(r, with_dtype):
    (n,) = r.unpack("<H", "record name length")
    name = r.take(n, "record name").decode("utf-8")
    dtype = _DTYPES[0]
    if with_dtype:
        (code,) = r.unpack("<B", "dtype code")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}", r.pos - 1)
        dtype = _DTYPES[code]
    (ndim,) = r.unpack("<B", "ndim")
    shape = r.unpack(f"<{ndim}I", "shape")
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(r.take(count * dtype.itemsize, f"data of {name}"), dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="))


def parse_checkpoint(data):
    """Decode checkpoint bytes into a :class:`Checkpoint`."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    params, buffers = {}, {}
    (n,) = r.unpack("<I", "parameter count")
    for _ in range(n):
        name, arr = _read_record(r, False)
        params[name] = arr
    (n,) = r.unpack("<I", "statistic count")
    for _ in range(n):
        name, arr = _read_record(r, True)
        buffers[name] = arr
    (n,) = r.unpack("<I", "config length")
    text = r.take(n, "config").decode("utf-8")
    if r.pos != len(data):
        raise FormatError("trailing bytes after config", r.pos)
    sections = cfgtext.read_sections(text, "checkpoint config")
    cfg = cfgtext.from_mapping(ModelConfig, sections.pop("model", {}), "checkpoint config")
    return Checkpoint(cfg.validate(), params, buffers, sections)


def parse_state(data):
    """Decode checkpoint bytes into ``(ModelConfig, params, buffers)``."""
    return parse_checkpoint(data)[:3]


def read_checkpoint(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def load_state(path):
    return read_checkpoint(path)[:3]


def load_model(path):
    cfg, params, buffers = load_state(path)
    model = build_model(cfg)
    model.load_state_dict(params, buffers)
    return model
