"""Time the compiled and numpy kernels, and a full forward/backward pass under each.

    python benchmarks/bench_kernels.py [--batch 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from facegen import kernels, nn
from facegen.data import default_schema


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    gen = np.random.default_rng(0)
    x1 = gen.normal(size=(args.batch, 3, 32, 32))
    x2 = gen.normal(size=(args.batch, 16, 16, 16))
    cols = gen.normal(size=(args.batch, 16 * 9, 256))
    pooled_in = gen.normal(size=(args.batch, 16, 32, 32))
    impls = kernels.backends()
    print(f"backends available: {', '.join(impls)} (active: {kernels.BACKEND})")

    cases = {
        "im2col 3x32x32 k3": lambda impl: kernels.im2col(x1, 3, 1, 1, impl=impl),
        "im2col 16x16x16 k3": lambda impl: kernels.im2col(x2, 3, 1, 1, impl=impl),
        "col2im 16x16x16 k3": lambda impl: kernels.col2im(cols, x2.shape, 3, 1, 1, impl=impl),
        "maxpool fwd 16x32x32": lambda impl: kernels.maxpool_forward(pooled_in, 2, 2, impl=impl),
    }
    _, idx = kernels.maxpool_forward(pooled_in, 2, 2)
    dout = gen.normal(size=(args.batch, 16, 16, 16))
    cases["maxpool bwd 16x32x32"] = lambda impl: kernels.maxpool_backward(dout, idx, pooled_in.shape, impl=impl)

    header = f"{'kernel':<24}" + "".join(f"{name:>12}" for name in impls)
    print(header)
    for label, fn in cases.items():
        row = f"{label:<24}"
        for impl in impls.values():
            row += f"{best_of(lambda: fn(impl), args.repeat) * 1e3:>10.2f}ms"
        print(row)

    spec = nn.default_spec(default_schema())
    params = nn.init_params(spec, 0)
    labels = np.zeros((args.batch, len(spec.heads)), dtype=np.int64)
    row = f"{'forward+backward':<24}"
    for impl in impls.values():
        saved = kernels._impl
        kernels._impl = impl
        try:
            def step():
                tr = nn.forward(spec, params, x1, mode="train", seed=1)
                nn.backward(spec, params, tr, nn.multihead_loss(tr, labels).logit_grads)

            row += f"{best_of(step, args.repeat) * 1e3:>10.2f}ms"
        finally:
            kernels._impl = saved
    print(row)


if __name__ == "__main__":
    main()
