"""Sample archives: binary container, min-max normalization, synthetic generator.

Archive layout (``.fcub``, all integers little-endian)::

    offset 0   b"FCUB"
    offset 4   u16 version (= 1)
    offset 6   u16 V_d, u16 V_s, u16 T, u16 H, u16 W
    offset 16  u32 sample count
    offset 20  V_d + V_s variable names, each u16 byte length + utf-8 bytes
    then per sample:
               u16 day of year (0..365)
               u8  label (0 or 1)
               f32 dynamic cube, V_d * T * H * W values, C order (var, t, h, w)
               f32 static cube,  V_s * H * W values, C order (var, h, w)

Synthetic samples are built from seeded low-frequency cosine mixtures (see
:func:`_smooth_field`) and labelled by :class:`LabelRule`, which depends only on
the centre pixel, so every label can be recomputed from the archive itself.
"""
import dataclasses
import io
import os
import struct
from typing import NamedTuple

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"FCUB"
VERSION = 1

DYNAMIC_NAMES = (
    "lst_day", "lst_night", "ndvi", "soil_moisture", "t2m_max",
    "wind_speed_max", "rh_min", "total_precipitation", "d2m_max", "sp_max",
)
STATIC_NAMES = (
    "dem", "slope", "roads_distance", "waterway_distance", "population_density",
) + tuple(f"clc_{i}" for i in range(1, 11))


@dataclasses.dataclass
class CubeArchive:
    dyn: np.ndarray      # N x V_d x T x H x W float32
    stat: np.ndarray     # N x V_s x H x W float32
    tau: np.ndarray      # N int64, day-of-year slot
    labels: np.ndarray   # N uint8
    dyn_names: tuple = DYNAMIC_NAMES
    static_names: tuple = STATIC_NAMES

    def __post_init__(self):
        self.dyn = np.ascontiguousarray(self.dyn, dtype=np.float32)
        self.stat = np.ascontiguousarray(self.stat, dtype=np.float32)
        self.tau = np.asarray(self.tau, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.dyn_names = tuple(self.dyn_names)
        self.static_names = tuple(self.static_names)
        n = len(self.labels)
        if self.dyn.ndim != 5 or self.stat.ndim != 4:
            raise ContractError("dynamic cube must be 5-D and static cube 4-D")
        if len(self.dyn) != n or len(self.stat) != n or len(self.tau) != n:
            raise ContractError("cubes, days and labels disagree on sample count")
        if self.dyn.shape[3:] != self.stat.shape[2:]:
            raise ContractError(f"spatial extents differ: {self.dyn.shape[3:]} vs {self.stat.shape[2:]}")
        if len(self.dyn_names) != self.dyn.shape[1] or len(self.static_names) != self.stat.shape[1]:
            raise ContractError("variable names do not match variable counts")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be 0 or 1")
        if n and (self.tau.min() < 0 or self.tau.max() > 365):
            raise ContractError("day of year must lie in [0, 365]")

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self):
        """``(V_d, V_s, T, H, W)``."""
        _, vd, t, h, w = self.dyn.shape
        return vd, self.stat.shape[1], t, h, w

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return CubeArchive(self.dyn[idx], self.stat[idx], self.tau[idx], self.labels[idx],
                           self.dyn_names, self.static_names)

    def __eq__(self, other):
        if not isinstance(other, CubeArchive):
            return NotImplemented
        return (
            self.dyn_names == other.dyn_names and self.static_names == other.static_names
            and np.array_equal(self.dyn, other.dyn) and np.array_equal(self.stat, other.stat)
            and np.array_equal(self.tau, other.tau) and np.array_equal(self.labels, other.labels)
        )


# ------------------------------------------------------------------ file io

def dump_archive(archive):
    vd, vs, t, h, w = archive.dims
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H5HI", VERSION, vd, vs, t, h, w, len(archive)))
    for name in archive.dyn_names + archive.static_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    dyn = archive.dyn.astype("<f4", copy=False)
    stat = archive.stat.astype("<f4", copy=False)
    for i in range(len(archive)):
        buf.write(struct.pack("<HB", int(archive.tau[i]), int(archive.labels[i])))
        buf.write(dyn[i].tobytes())
        buf.write(stat[i].tobytes())
    return buf.getvalue()


def write_archive(archive, path):
    data = dump_archive(archive)
    with open(path, "wb") as f:
        f.write(data)


def parse_archive(data):
    if len(data) < 20:
        raise FormatError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}", 0)
    version, vd, vs, t, h, w, n = struct.unpack_from("<H5HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}", 4)
    if min(vd, vs, t, h, w) == 0:
        raise FormatError(f"zero extent in header {(vd, vs, t, h, w)}", 6)
    pos = 20
    names = []
    for _ in range(vd + vs):
        if pos + 2 > len(data):
            raise FormatError("truncated variable names", pos)
        (k,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + k > len(data):
            raise FormatError("truncated variable names", pos)
        names.append(bytes(data[pos:pos + k]).decode("utf-8"))
        pos += k
    dsize, ssize = vd * t * h * w, vs * h * w
    rec = 3 + 4 * (dsize + ssize)
    payload = len(data) - pos
    if payload != n * rec:
        complete = payload // rec
        where = pos + complete * rec
        if payload < n * rec:
            raise FormatError(f"truncated payload: {complete} of {n} records complete", where)
        raise FormatError(f"payload of {payload} bytes does not match {n} records of extents {(vd, vs, t, h, w)}", where)
    raw = np.frombuffer(data, dtype=np.uint8, count=n * rec, offset=pos).reshape(n, rec)
    tau = raw[:, 0:2].copy().view("<u2").reshape(n).astype(np.int64)
    labels = raw[:, 2].copy()
    bad = np.flatnonzero(labels > 1)
    if bad.size:
        raise FormatError(f"record {bad[0]} has non-binary label {labels[bad[0]]}", pos + int(bad[0]) * rec + 2)
    bad = np.flatnonzero(tau > 365)
    if bad.size:
        raise FormatError(f"record {bad[0]} has day of year {tau[bad[0]]}", pos + int(bad[0]) * rec)
    body = raw[:, 3:].copy().view("<f4")
    dyn = body[:, :dsize].reshape(n, vd, t, h, w).astype(np.float32)
    stat = body[:, dsize:].reshape(n, vs, h, w).astype(np.float32)
    return CubeArchive(dyn, stat, tau, labels, tuple(names[:vd]), tuple(names[vd:]))


def read_archive(path):
    with open(path, "rb") as f:
        return parse_archive(f.read())


# ------------------------------------------------------------ normalization

@dataclasses.dataclass
class NormStats:
    dyn_min: np.ndarray
    dyn_max: np.ndarray
    stat_min: np.ndarray
    stat_max: np.ndarray


def fit_norm(archive):
    """Per-variable min and max over every sample, time step and pixel."""
    return NormStats(
        archive.dyn.min(axis=(0, 2, 3, 4)), archive.dyn.max(axis=(0, 2, 3, 4)),
        archive.stat.min(axis=(0, 2, 3)), archive.stat.max(axis=(0, 2, 3)),
    )


def norm_to_section(stats):
    """``{key: text}`` form of ``stats`` (exact float round trip)."""
    return {f.name: ", ".join(repr(float(v)) for v in getattr(stats, f.name))
            for f in dataclasses.fields(NormStats)}


def norm_from_section(section):
    try:
        return NormStats(**{f.name: np.array([float(v) for v in section[f.name].split(",")])
                            for f in dataclasses.fields(NormStats)})
    except (KeyError, ValueError) as exc:
        raise ContractError(f"malformed normalization section: {exc}") from None


def _scale(x, lo, hi, shape):
    lo = lo.astype(np.float64).reshape(shape)
    span = (hi.astype(np.float64) - lo.reshape(-1)).reshape(shape)
    safe = np.where(span > 0, span, 1.0)
    y = np.where(span > 0, (x - lo) / safe, 0.0)
    return np.clip(y, 0.0, 1.0).astype(np.float32)


def apply_norm(archive, stats):
    """Map each variable to ``[0, 1]`` with the given extremes; constant variables become 0."""
    dyn = _scale(archive.dyn, stats.dyn_min, stats.dyn_max, (1, -1, 1, 1, 1))
    stat = _scale(archive.stat, stats.stat_min, stats.stat_max, (1, -1, 1, 1))
    return CubeArchive(dyn, stat, archive.tau, archive.labels, archive.dyn_names, archive.static_names)


# ------------------------------------------------------------------ batches

class SampleBatch(NamedTuple):
    dyn: np.ndarray
    stat: np.ndarray
    tau: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def batch_iter(archive, batch_size, shuffle_seed=None):
    """Yield batches in a seeded permutation (input order when seed is ``None``)."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    n = len(archive)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        yield SampleBatch(archive.dyn[idx], archive.stat[idx], archive.tau[idx], archive.labels[idx], idx)


# --------------------------------------------------------------- synthetic

@dataclasses.dataclass(frozen=True)
class LabelRule:
    """``label = 1`` iff the centre-pixel score exceeds ``threshold``.

    score = mean(dyn[dyn_var, T-last_days:, c, c])
            + static_weight * stat[static_var, c, c]
            + seasonal_weight * sin(2 * pi * tau / 366)

    with ``c = H // 2`` (row) and ``W // 2`` (column).
    """

    dyn_var: int = 0
    last_days: int = 3
    static_var: int = 0
    static_weight: float = 0.5
    seasonal_weight: float = 1.0
    threshold: float = 1.0

    def score(self, dyn, stat, tau):
        dyn = np.asarray(dyn, dtype=np.float64)
        stat = np.asarray(stat, dtype=np.float64)
        ch, cw = dyn.shape[-2] // 2, dyn.shape[-1] // 2
        recent = dyn[..., self.dyn_var, -self.last_days:, ch, cw].mean(axis=-1)
        return (recent + self.static_weight * stat[..., self.static_var, ch, cw]
                + self.seasonal_weight * np.sin(2 * np.pi * np.asarray(tau, dtype=np.float64) / 366))

    def label(self, dyn, stat, tau):
        return (self.score(dyn, stat, tau) > self.threshold).astype(np.uint8)


def _smooth_field(rng, shape, modes=3, max_cycles=1.5):
    """Sum of ``modes`` random plane cosines with at most ``max_cycles`` periods across the patch."""
    grids = np.meshgrid(*[np.arange(s) / s for s in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(modes):
        freq = rng.uniform(-max_cycles, max_cycles, size=len(shape))
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        arg = sum(f * g for f, g in zip(freq, grids))
        out += amp * np.cos(2 * np.pi * arg + phase)
    return out / modes


def _candidate(rng, vd, vs, t, h, w):
    tau = int(rng.integers(0, 366))
    stat = np.stack([_smooth_field(rng, (h, w)) + 0.05 * rng.standard_normal((h, w)) for _ in range(vs)])
    days = tau - (t - 1 - np.arange(t))  # observed days, last one is the forecast origin
    dyn = np.empty((vd, t, h, w))
    for v in range(vd):
        seasonal = 0.6 * np.sin(2 * np.pi * days / 366 + 0.4 * v)
        local = 0.5 * stat[v % vs]  # dynamic variables follow the static terrain
        field = _smooth_field(rng, (t, h, w), max_cycles=1.0)
        dyn[v] = field + local[None] + seasonal[:, None, None] + 0.05 * rng.standard_normal((t, h, w))
    return dyn.astype(np.float32), stat.astype(np.float32), tau


def generate_synthetic(seed, n_pos, n_neg, rule=None, dims=(10, 15, 10, 25, 25)):
    """Draw candidates until ``n_pos`` positives and ``n_neg`` negatives are collected.

    Samples keep their draw order; positives and negatives are interleaved as
    they come. Deterministic for a given seed.
    """
    if n_pos < 0 or n_neg < 0:
        raise ContractError("sample counts must be non-negative")
    rule = rule or LabelRule()
    vd, vs, t, h, w = dims
    rng = np.random.default_rng(seed)
    dyns, stats, taus, labels = [], [], [], []
    need = {0: n_neg, 1: n_pos}
    attempts = 0
    while need[0] or need[1]:
        attempts += 1
        if attempts > 100 * (n_pos + n_neg) + 1000:
            raise RuntimeError("label rule rarely produces the requested class; adjust the threshold")
        dyn, stat, tau = _candidate(rng, vd, vs, t, h, w)
        y = int(rule.label(dyn, stat, tau))
        if need[y]:
            need[y] -= 1
            dyns.append(dyn)
            stats.append(stat)
            taus.append(tau)
            labels.append(y)
    n = len(labels)
    names_d = DYNAMIC_NAMES if vd == len(DYNAMIC_NAMES) else tuple(f"dyn_{i}" for i in range(vd))
    names_s = STATIC_NAMES if vs == len(STATIC_NAMES) else tuple(f"static_{i}" for i in range(vs))
    return CubeArchive(
        np.array(dyns, dtype=np.float32).reshape(n, vd, t, h, w),
        np.array(stats, dtype=np.float32).reshape(n, vs, h, w),
        np.array(taus, dtype=np.int64), np.array(labels, dtype=np.uint8), names_d, names_s,
    )


def archive_summary(archive):
    vd, vs, t, h, w = archive.dims
    pos = int(archive.labels.sum())
    return f"{len(archive)} samples ({pos} positive, {len(archive) - pos} negative); V_d={vd} V_s={vs} T={t} H={h} W={w}"


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
