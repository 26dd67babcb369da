"""Absolute day-of-year encoding.

Each day index ``tau`` in ``[0, 365]`` maps to a fixed 256-d sinusoid vector;
a learnable per-dimension weight scales it before it is added to the dynamic
feature vector.
"""
import datetime
from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Module
from .tensor import Tensor

DAYS = 366
DIM = 256
_SLOT_OFFSETS = np.cumsum([0, 31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30])


@lru_cache(maxsize=None)
def _table(dim, base):
    tau = np.arange(DAYS, dtype=np.float64)[:, None]
    j = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = tau / base ** (2 * j / dim)
    table = np.empty((DAYS, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def build_encoding_table(dim=DIM, base=10.0, dtype=np.float64):
    """``table[tau, 2j] = sin(tau / base**(2j/dim))``, ``table[tau, 2j+1] = cos(...)``.

    Angles are evaluated in float64; the result is cast to ``dtype``.
    """
    if dim % 2:
        raise ContractError("encoding dimension must be even")
    return _table(dim, float(base)).astype(dtype)


def day_of_year(date):
    """Zero-based slot in a fixed 366-day calendar (Feb 29 is slot 59).

    Every month/day pair keeps its slot in all years, so Mar 1 is 60 and Dec 31
    is 365 whether or not the year is a leap year.
    """
    if isinstance(date, str):
        try:
            date = datetime.date.fromisoformat(date)
        except ValueError as exc:
            raise ContractError(f"invalid date {date!r}: {exc}") from None
    if not isinstance(date, datetime.date):
        raise ContractError(f"expected a date, got {type(date).__name__}")
    return int(_SLOT_OFFSETS[date.month - 1] + date.day - 1)


class TemporalEncoding(Module):
    """Adds ``W * table[tau]`` to a ``N x 256`` feature matrix."""

    def __init__(self, dim=DIM, base=10.0, dtype=np.float32):
        self.dim = dim
        self.table = build_encoding_table(dim, base, dtype)
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)

    def forward(self, x_d, tau):
        return inject(x_d, tau, self.weight, self.table)


def inject(x_d, tau, weight, table):
    tau = np.asarray(tau)
    if tau.ndim != 1 or tau.shape[0] != x_d.shape[0]:
        raise DimensionError(f"need one day index per sample: {tau.shape} vs {x_d.shape}")
    if tau.size and (tau.min() < 0 or tau.max() >= table.shape[0]):
        raise ContractError(f"day index out of range [0, {table.shape[0] - 1}]")
    if x_d.shape[1] != table.shape[1]:
        raise DimensionError(f"feature width {x_d.shape[1]} != encoding width {table.shape[1]}")
    rows = Tensor(table[tau.astype(np.int64)], dtype=x_d.dtype)
    return x_d + weight * rows
