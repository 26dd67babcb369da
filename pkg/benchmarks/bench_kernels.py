"""Numba vs numpy kernel timings at the default model's shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 16]

Times each hot kernel on both backends (median of ``--repeat`` runs after a
warm-up call that also triggers JIT compilation), checks that both return the
same result, then times one full training step of the default model per
backend.
"""
import argparse
import statistics
import time

import numpy as np

from loancast import _kernels
from loancast.datacube import apply_norm, fit_norm, generate_synthetic
from loancast.model import ModelConfig, build_model
from loancast.trainer import Trainer, TrainConfig


def timed(fn, repeat):
    fn()
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def kernel_cases(batch, rng):
    # (name, padded input shape, kernel, stride): the three dynamic convs and pools
    convs = [
        ("im2col conv1", (batch, 10, 12, 27, 27), (3, 3, 3), (1, 1, 1)),
        ("im2col conv2", (batch, 16, 12, 14, 14), (3, 3, 3), (1, 1, 1)),
        ("im2col conv3", (batch, 32, 12, 8, 8), (3, 3, 3), (1, 1, 1)),
    ]
    pools = [
        ("maxpool 1x2x2", (batch, 16, 10, 25, 25), (1, 2, 2)),
        ("maxpool 2x2x2", (batch, 256, 10, 6, 6), (2, 2, 2)),
    ]
    for name, shape, k, s in convs:
        x = rng.standard_normal(shape).astype(np.float32)
        yield name, lambda be, x=x, k=k, s=s: be[0](x, k, s)
        cols = be_np[0](x, k, s)
        yield name.replace("im2col", "col2im"), lambda be, c=cols, sh=shape, k=k, s=s: be[1](c, sh, k, s)
    for name, shape, w in pools:
        x = rng.standard_normal(shape).astype(np.float32)
        yield name + " fwd", lambda be, x=x, w=w: be[2](x, w, w)
        out, idx = be_np[2](x, w, w)
        g = np.ones_like(out)
        yield name + " bwd", lambda be, g=g, idx=idx, sh=shape: be[3](g, idx, sh, False)


be_np = _kernels.select(False)


def train_step_time(batch, repeat):
    raw = generate_synthetic(0, batch // 2, batch - batch // 2)
    archive = apply_norm(raw, fit_norm(raw))
    trainer = Trainer(build_model(ModelConfig()), TrainConfig(batch_size=batch))
    return timed(lambda: trainer.train_epoch(archive), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--skip-step", action="store_true", help="kernels only")
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    be_nb = _kernels.select(True)
    rng = np.random.default_rng(0)

    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  same")
    for name, call in kernel_cases(args.batch, rng):
        a, b = call(be_np), call(be_nb)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_np = timed(lambda: call(be_np), args.repeat)
        t_nb = timed(lambda: call(be_nb), args.repeat)
        print(f"{name:<22} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.2f}x  {'yes' if same else 'NO'}")

    if not args.skip_step:
        print(f"\ntraining step, default model, batch {args.batch}")
        for label, flag in (("numpy", False), ("numba", True)):
            _kernels.use_backend(flag)
            print(f"  {label:<6} {train_step_time(args.batch, args.repeat):.3f} s")


if __name__ == "__main__":
    main()
