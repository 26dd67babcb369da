import math

import numpy as np
import pytest

from loancast import loan
from loancast.errors import ContractError, DimensionError
from loancast.nn import RunningStats
from loancast.tensor import Tensor

from oracles import conv2d_loop, nearest_index


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def layer64(channels=3, cond=2, variant="activation", seed=0):
    return loan.LOAN(channels, cond, np.random.default_rng(seed), variant, dtype=np.float64)


def set_identity(layer):
    layer.gamma_conv.weight.data[:] = 0
    layer.gamma_conv.bias.data[:] = 1
    layer.beta_conv.weight.data[:] = 0
    layer.beta_conv.bias.data[:] = 0


# --------------------------------------------------------- normalize

def test_normalize_four_values():
    stats = RunningStats(1, eps=0.0, std_eps=True, dtype=np.float64)
    out = loan.normalize_conditional_map(f64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)), stats, True)
    mu = 2.5
    sigma = math.sqrt(sum((v - mu) ** 2 for v in (1, 2, 3, 4)) / 4)
    assert sigma == pytest.approx(1.11803, abs=1e-5)
    want = [(v - mu) / sigma for v in (1, 2, 3, 4)]
    np.testing.assert_allclose(out.data.ravel(), want, atol=1e-12)
    np.testing.assert_allclose(want, [-1.34164, -0.44721, 0.44721, 1.34164], atol=1e-5)


def test_normalize_constant_map_is_zero():
    stats = RunningStats(2, std_eps=True, dtype=np.float64)
    out = loan.normalize_conditional_map(f64(np.full((3, 2, 4, 4), 2.5)), stats, True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_normalize_statistics():
    stats = RunningStats(3, std_eps=True, dtype=np.float64)
    z = np.random.default_rng(0).standard_normal((4, 3, 5, 5)) * 2 + 1
    out = loan.normalize_conditional_map(f64(z), stats, True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.std(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_normalize_errors_and_eval_mode():
    stats = RunningStats(2, std_eps=True, dtype=np.float64)
    with pytest.raises(ContractError):
        loan.normalize_conditional_map(f64(np.zeros((0, 2, 3, 3))), stats, True)
    with pytest.raises(DimensionError):
        loan.normalize_conditional_map(f64(np.zeros((2, 2, 3))), stats, True)
    with pytest.raises(ContractError):
        loan.normalize_conditional_map(f64(np.ones((2, 2, 3, 3))), stats, False)
    stats.running_mean[:] = [1.0, -1.0]
    stats.running_var[:] = [4.0, 1.0]
    stats.init_stats()
    out = loan.normalize_conditional_map(f64(np.ones((1, 2, 1, 1))), stats, False).data.ravel()
    np.testing.assert_allclose(out, [0.0, 2.0 / (1 + 1e-5)])


# --------------------------------------------------------- generate

def test_identity_projection():
    layer = layer64()
    set_identity(layer)
    z = f64(np.random.default_rng(1).standard_normal((2, 2, 4, 4)))
    gamma, beta = layer.generate_modulation(z)
    np.testing.assert_array_equal(gamma.data, 1.0)
    np.testing.assert_array_equal(beta.data, 0.0)


def test_constant_map_gives_constant_interior():
    layer = layer64()
    layer.eval()
    layer.cond_norm.init_stats()
    z = f64(np.full((1, 2, 6, 6), 0.7))
    for out in layer.generate_modulation(z):
        interior = out.data[:, :, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, interior[:, :, :1, :1] * np.ones_like(interior), atol=1e-12)


def test_generate_matches_loop_oracle():
    layer = layer64()
    layer.eval()
    layer.cond_norm.init_stats()
    z = np.random.default_rng(2).standard_normal((2, 2, 4, 4))
    gamma, beta = layer.generate_modulation(f64(z))
    z_hat = z / (1.0 + 1e-5)
    for conv, got in ((layer.gamma_conv, gamma), (layer.beta_conv, beta)):
        want = conv2d_loop(z_hat, conv.weight.data, conv.bias.data, (1, 1))
        np.testing.assert_allclose(got.data, want, atol=1e-5)


def test_generate_channel_mismatch():
    with pytest.raises(DimensionError):
        layer64().generate_modulation(f64(np.ones((2, 3, 4, 4))))


def test_projections_have_exact_channel_count():
    layer = layer64(channels=7, cond=5)
    gamma, beta = layer.generate_modulation(f64(np.random.default_rng(3).standard_normal((2, 5, 3, 3))))
    assert gamma.shape == beta.shape == (2, 7, 3, 3)


# --------------------------------------------------------- modulate

def test_modulate_identity_and_zero_input():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((2, 3, 4, 5, 5))
    beta = rng.standard_normal((2, 3, 5, 5))
    np.testing.assert_array_equal(loan.modulate(f64(z), f64(np.ones((2, 3, 5, 5))), f64(np.zeros((2, 3, 5, 5)))).data, z)
    out = loan.modulate(f64(np.zeros_like(z)), f64(rng.standard_normal((2, 3, 5, 5))), f64(beta)).data
    for t in range(4):
        np.testing.assert_array_equal(out[:, :, t], beta)


def test_modulate_elementwise_oracle_and_temporal_constancy():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((2, 2, 3, 2, 2))
    g, b = rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((2, 2, 2, 2))
    out = loan.modulate(f64(z), f64(g), f64(b)).data
    for n, k, t, h, w in np.ndindex(*z.shape):
        assert out[n, k, t, h, w] == z[n, k, t, h, w] * g[n, k, h, w] + b[n, k, h, w]


def test_modulate_spatial_mismatch():
    with pytest.raises(DimensionError):
        loan.modulate(f64(np.ones((1, 2, 3, 4, 4))), f64(np.ones((1, 2, 3, 3))), f64(np.ones((1, 2, 3, 3))))


def test_layer_applies_same_modulation_at_every_step():
    layer = layer64()
    rng = np.random.default_rng(6)
    for conv in (layer.gamma_conv, layer.beta_conv):
        conv.weight.data[:] = rng.standard_normal(conv.weight.shape)
    z_s = f64(rng.standard_normal((4, 2, 3, 3)))
    # with a time-constant input every step must come out identical
    z_d = np.repeat(rng.standard_normal((4, 3, 1, 3, 3)), 5, axis=2)
    out = layer(f64(z_d), z_s).data
    for t in range(1, 5):
        np.testing.assert_array_equal(out[:, :, t], out[:, :, 0])


# --------------------------------------------------------- variable-conditioned

def test_prepare_conditional_map_shapes_and_resize():
    layer = layer64(channels=3, cond=10, variant="variable")
    x = np.random.default_rng(7).standard_normal((2, 10, 4, 4))
    out = layer.prepare_conditional_map(f64(x), (2, 2))
    assert out.shape == (2, 20, 2, 2)
    resized = np.empty((2, 10, 2, 2))
    for i in range(2):
        for j in range(2):
            resized[:, :, i, j] = x[:, :, nearest_index(i, 4, 2), nearest_index(j, 4, 2)]
    want = conv2d_loop(resized, layer.pre_conv.weight.data, None, (1, 1))
    np.testing.assert_allclose(out.data, want, atol=1e-10)
    same = layer.prepare_conditional_map(f64(x), (4, 4))
    np.testing.assert_allclose(same.data, conv2d_loop(x, layer.pre_conv.weight.data, None, (1, 1)), atol=1e-10)


def test_prepare_conditional_map_rejects_upsampling():
    layer = layer64(cond=2, variant="variable")
    with pytest.raises(ContractError):
        layer.prepare_conditional_map(f64(np.ones((1, 2, 2, 2))), (4, 4))


def test_activation_variant_has_no_pre_conv():
    with pytest.raises(ValueError):
        layer64().prepare_conditional_map(f64(np.ones((1, 2, 4, 4))), (2, 2))
    with pytest.raises(ValueError):
        loan.LOAN(2, 2, np.random.default_rng(0), "bogus")


def test_fresh_layer_is_near_identity():
    layer = loan.LOAN(4, 4, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    z_d = rng.standard_normal((3, 4, 2, 5, 5)).astype(np.float32)
    out = layer(Tensor(z_d), Tensor(rng.standard_normal((3, 4, 5, 5)).astype(np.float32))).data
    assert np.abs(out - z_d).max() < 0.1
