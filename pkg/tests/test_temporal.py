import datetime

import numpy as np
import pytest

from loancast import temporal
from loancast.errors import ContractError, DimensionError
from loancast.gradcheck import check
from loancast.tensor import Tensor

from oracles import te_entry


def test_table_matches_scalar_math():
    table = temporal.build_encoding_table()
    assert table.shape == (366, 256) and table.dtype == np.float64
    worst = max(abs(table[tau, col] - te_entry(tau, col)) for tau in range(366) for col in range(256))
    assert worst <= 1e-12


def test_table_values_at_zero_and_range():
    table = temporal.build_encoding_table()
    np.testing.assert_array_equal(table[0, 0::2], 0.0)
    np.testing.assert_array_equal(table[0, 1::2], 1.0)
    assert np.abs(table).max() <= 1.0
    assert table[100, 0] == pytest.approx(np.sin(100.0), abs=1e-15)


def test_rows_pairwise_distinct():
    table = temporal.build_encoding_table()
    d2 = ((table[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
    off = d2[~np.eye(366, dtype=bool)]
    assert off.min() > 0


def test_table_is_pure():
    a = temporal.build_encoding_table()
    a_copy = a.copy()
    a[:] = 0  # callers get their own copy
    b = temporal.build_encoding_table()
    np.testing.assert_array_equal(b, a_copy)
    assert temporal.build_encoding_table(dtype=np.float32).dtype == np.float32


def test_base_is_configurable():
    t = temporal.build_encoding_table(base=10000.0)
    assert t[5, 2] == pytest.approx(np.sin(5 / 10000.0 ** (2 / 256)))


@pytest.mark.parametrize("date,want", [
    ("2021-01-01", 0), ("2020-03-01", 60), ("2020-12-31", 365), ("2020-02-29", 59),
    ("2021-03-01", 60), ("2021-02-28", 58), (datetime.date(2019, 12, 31), 365),
])
def test_day_of_year(date, want):
    assert temporal.day_of_year(date) == want


@pytest.mark.parametrize("bad", ["2021-02-29", "2021-13-01", "yesterday"])
def test_day_of_year_rejects_invalid(bad):
    with pytest.raises(ContractError):
        temporal.day_of_year(bad)


def test_every_calendar_day_gets_a_distinct_slot():
    start = datetime.date(2020, 1, 1)
    slots = [temporal.day_of_year(start + datetime.timedelta(days=i)) for i in range(366)]
    assert slots == list(range(366))


def test_inject_annihilation_and_table_rows():
    table = temporal.build_encoding_table()
    tau = np.array([0, 59, 365])
    x = np.random.default_rng(0).standard_normal((3, 256))
    out = temporal.inject(Tensor(x, dtype=np.float64), tau, Tensor(np.zeros(256), dtype=np.float64), table)
    np.testing.assert_array_equal(out.data, x)
    out = temporal.inject(Tensor(np.zeros((3, 256)), dtype=np.float64), tau, Tensor(np.ones(256), dtype=np.float64), table)
    np.testing.assert_array_equal(out.data, table[tau])


def test_inject_weight_gradient():
    te = temporal.TemporalEncoding(dtype=np.float64)
    assert te.weight.shape == (256,)
    np.testing.assert_array_equal(te.weight.data, 1.0)
    tau = np.array([3, 3, 200])
    x = Tensor(np.random.default_rng(1).standard_normal((3, 256)), requires_grad=True, dtype=np.float64)
    errs = check(lambda: te(x, tau).sum(), {"x": x, "W": te.weight})
    assert max(errs.values()) < 1e-4
    np.testing.assert_allclose(te.weight.grad, te.table[tau].sum(axis=0), atol=1e-12)


def test_inject_errors():
    table = temporal.build_encoding_table()
    w = Tensor(np.ones(256))
    with pytest.raises(ContractError):
        temporal.inject(Tensor(np.zeros((1, 256))), np.array([366]), w, table)
    with pytest.raises(ContractError):
        temporal.inject(Tensor(np.zeros((1, 256))), np.array([-1]), w, table)
    with pytest.raises(DimensionError):
        temporal.inject(Tensor(np.zeros((2, 256))), np.array([1]), w, table)
