"""Finite-difference verification of backward rules (float64).

Each check reduces a layer's output to a scalar with a fixed random
weighting, computes the analytic gradient by backpropagation, and compares it
elementwise against a central difference with step ``h``:

    |analytic - numeric| / (|numeric| + 1e-12)
"""
import dataclasses
import time

import numpy as np

from . import loan as loan_mod
from . import nn
from . import temporal
from .model import Classifier, build_model, tiny_config
from .tensor import Tensor, concat, matmul_1x1conv

H = 1e-6
LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)


def numeric_grad(fn, tensor, h=H, index=None):
    """Central difference of scalar ``fn()`` w.r.t. the flat ``index`` entries of ``tensor`` (all by default)."""
    flat = tensor.data.reshape(-1)
    index = np.arange(flat.size) if index is None else np.asarray(index)
    grad = np.zeros(index.size)
    for j, i in enumerate(index):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad[j] = (up - down) / (2 * h)
    return grad


def check(fn, wrt, h=H, max_elems=None, seed=0):
    """Max relative error per tensor in ``wrt`` (dict name -> Tensor).

    With ``max_elems`` set, larger tensors are probed at that many seeded
    random positions instead of exhaustively.
    """
    rng = np.random.default_rng(seed)
    for t in wrt.values():
        t.grad = None
    loss = fn()
    loss.backward()
    out = {}
    for name, t in wrt.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.astype(np.float64).reshape(-1)
        index = np.arange(t.size)
        if max_elems is not None and t.size > max_elems:
            index = np.sort(rng.choice(t.size, max_elems, replace=False))
        numeric = numeric_grad(fn, t, h, index)
        out[name] = float(rel_error(analytic[index], numeric).max())
    return out


def _weighted_sum(y, weights):
    return (y * Tensor(weights)).sum()


@dataclasses.dataclass
class CheckResult:
    layer: str
    param: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol


def _rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def _layer_cases(rng):
    """Yield ``(layer, fn, wrt)`` triples over small random float64 inputs."""
    def scalarize(out_fn):
        probe = out_fn()
        w = rng.standard_normal(probe.shape)
        return lambda: _weighted_sum(out_fn(), w)

    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    yield "elementwise", scalarize(lambda: (a * b + a) / (b * b + 2.0) - b), {"a": a, "b": b}

    x, w, bias = _rand(rng, 4, 8), _rand(rng, 3, 8), _rand(rng, 3)
    yield "matmul_1x1conv", scalarize(lambda: matmul_1x1conv(x, w, bias)), {"x": x, "weight": w, "bias": bias}

    x, w, bias = _rand(rng, 2, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    yield "conv2d", scalarize(lambda: nn.conv2d(x, w, bias, 1, 1)), {"x": x, "weight": w, "bias": bias}

    x, w, bias = _rand(rng, 1, 2, 3, 4, 4), _rand(rng, 2, 2, 3, 3, 3), _rand(rng, 2)
    yield "conv3d", scalarize(lambda: nn.conv3d(x, w, bias, 1, 1)), {"x": x, "weight": w, "bias": bias}

    x = _rand(rng, 2, 2, 4, 4)
    yield "maxpool2d", scalarize(lambda: nn.maxpool2d(x, (2, 2))), {"x": x}

    x = _rand(rng, 1, 2, 4, 4, 4)
    yield "maxpool3d", scalarize(lambda: nn.maxpool3d(x, (2, 2, 2))), {"x": x}

    x = _rand(rng, 3, 4, 5)
    yield "relu", scalarize(lambda: nn.relu(x)), {"x": x}

    x = _rand(rng, 4, 5)
    yield "softmax", scalarize(lambda: nn.softmax(x)), {"x": x}

    x = _rand(rng, 2, 3, 2, 3, 3)
    yield "global_avg_pool", scalarize(lambda: nn.global_avg_pool(x)), {"x": x}

    bn = nn.BatchNorm(3, dtype=np.float64)
    bn.weight.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.bias.data[:] = rng.standard_normal(3)
    x = _rand(rng, 4, 3, 2, 3, 3)
    yield "batchnorm", scalarize(lambda: nn.batch_norm(x, bn, True)), {"x": x, "weight": bn.weight, "bias": bn.bias}

    x = _rand(rng, 6, 20)
    drop_rng = np.random.default_rng(1)

    def dropped():
        drop_rng.bit_generator.state = np.random.default_rng(1).bit_generator.state
        return nn.dropout(x, 0.5, True, drop_rng)
    yield "dropout", scalarize(dropped), {"x": x}

    head = Classifier(12, (8, 6, 4, 2), 0.5, rng, np.float64)
    x = _rand(rng, 5, 12)

    def classified():
        head.rng = np.random.default_rng(2)
        return head(x)
    yield "classifier", scalarize(classified), {
        "x": x, "layers.0.weight": head.layers[0].weight, "layers.3.bias": head.layers[3].bias}

    probs = Tensor(rng.uniform(0.05, 0.95, size=(6, 1)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 2, 6)
    yield "bce", lambda: nn.bce_loss(probs, labels), {"probs": probs}

    layer = loan_mod.LOAN(3, 2, rng, "activation", dtype=np.float64)
    for conv in (layer.gamma_conv, layer.beta_conv):
        conv.weight.data[:] = rng.standard_normal(conv.weight.shape) * 0.5
    z_s = _rand(rng, 4, 2, 3, 3)
    yield "loan_normalize", scalarize(lambda: loan_mod.normalize_conditional_map(z_s, layer.cond_norm, True)), {"z_s": z_s}

    z_hat = _rand(rng, 2, 2, 3, 3)
    yield "loan_generate", scalarize(lambda: concat(list(layer.generate_modulation(z_hat)), axis=1)), {
        "z_hat": z_hat, "gamma_conv.weight": layer.gamma_conv.weight, "beta_conv.bias": layer.beta_conv.bias}

    z_d, g, be = _rand(rng, 2, 3, 2, 3, 3), _rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 3, 3)
    yield "loan_modulate", scalarize(lambda: loan_mod.modulate(z_d, g, be)), {"z_d": z_d, "gamma": g, "beta": be}

    z_d, z_s = _rand(rng, 4, 3, 2, 3, 3), _rand(rng, 4, 2, 3, 3)
    yield "loan_layer", scalarize(lambda: layer(z_d, z_s)), {"z_d": z_d, "z_s": z_s, "gamma_conv.weight": layer.gamma_conv.weight}

    vlayer = loan_mod.LOAN(3, 2, rng, "variable", dtype=np.float64)
    for conv in (vlayer.gamma_conv, vlayer.beta_conv):
        conv.weight.data[:] = rng.standard_normal(conv.weight.shape) * 0.5
    z_d, raw = _rand(rng, 4, 3, 2, 2, 2), _rand(rng, 4, 2, 4, 4)
    yield "loan_variable", scalarize(lambda: vlayer(z_d, raw)), {"z_d": z_d, "static": raw, "pre_conv.weight": vlayer.pre_conv.weight}

    te = temporal.TemporalEncoding(dtype=np.float64)
    te.weight.data[:] = rng.standard_normal(256)
    x_d = _rand(rng, 2, 256)
    tau = np.array([3, 200])
    yield "te_inject", scalarize(lambda: te(x_d, tau)), {"x_d": x_d, "W": te.weight}


def _model_cases(cfgs):
    for label, cfg in cfgs:
        rng = np.random.default_rng(cfg.seed + 7)
        model = build_model(cfg, dtype=np.float64)
        # zero biases put ReLU inputs exactly on the kink whenever a whole
        # input row is dropped; random offsets keep the check differentiable
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.data[:] = rng.standard_normal(p.shape) * 0.1
        for lo in getattr(model, "loans", []):
            for conv in (lo.gamma_conv, lo.beta_conv):
                conv.weight.data[:] = rng.standard_normal(conv.weight.shape) * 0.3
        n = 4
        dyn = rng.uniform(0, 1, (n, cfg.dyn_vars, cfg.time_steps, cfg.patch, cfg.patch))
        stat = rng.uniform(0, 1, (n, cfg.static_vars, cfg.patch, cfg.patch))
        tau = rng.integers(0, 366, n)
        labels = np.array([0, 1, 1, 0])

        def fn(model=model, dyn=dyn, stat=stat, tau=tau, labels=labels):
            model.reseed(0)
            return nn.bce_loss(model(dyn, stat, tau), labels)

        yield label, fn, dict(model.named_parameters())


def model_configs():
    return [
        ("model:two-branch", tiny_config()),
        ("model:two-branch-variable", tiny_config(loan_variant="variable")),
        ("model:one-branch-3d", tiny_config(arch="one-branch-3d", loan_blocks=())),
    ]


MODEL_SAMPLES = 64


def run_suite(seed=0, include_model=True):
    """Every layer check plus the end-to-end tiny models; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    results = []
    for layer, fn, wrt in _layer_cases(rng):
        for param, err in check(fn, wrt).items():
            results.append(CheckResult(layer, param, err, LAYER_TOL))
    if include_model:
        for layer, fn, wrt in _model_cases(model_configs()):
            errs = check(fn, wrt, max_elems=MODEL_SAMPLES, seed=seed)
            worst = max(errs, key=errs.get)
            results.append(CheckResult(layer, f"all ({len(errs)} tensors, worst {worst})", errs[worst], MODEL_TOL))
    return results


def format_results(results, elapsed=None):
    lines = [f"{'layer':<28} {'parameter':<48} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.layer:<28} {r.param:<48} {r.error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f} s")
    return "\n".join(lines)


def timed_suite(seed=0):
    t0 = time.perf_counter()
    res = run_suite(seed)
    return res, time.perf_counter() - t0
