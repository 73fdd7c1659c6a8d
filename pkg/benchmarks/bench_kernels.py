"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size H]

Each kernel is run on the same float32 inputs under both backends; a last
row times one FlowNet forward+backward pass with each backend swapped in.
"""
import argparse
import timeit

import numpy as np

from interslice.synthesis import FlowNet
from interslice.tensor import ParamSet, Tensor, backward, kernels


def kernel_cases(size, rng):
    x = rng.normal(size=(6, 32, size, size)).astype(np.float32)
    cols = rng.normal(size=(6 * size * size, 32 * 9)).astype(np.float32)
    img = rng.uniform(size=(6, 1, size, size)).astype(np.float32)
    flow = rng.normal(0, 2, size=(6, 2, size, size)).astype(np.float32)
    small = rng.normal(size=(6, 64, size // 2, size // 2)).astype(np.float32)
    return {
        "im2col 3x3": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 3x3": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "grid_sample fwd": lambda m: m.grid_sample_fwd(img, flow),
        "grid_sample bwd": lambda m: m.grid_sample_bwd(img, flow, img),
        "upsample2 fwd": lambda m: m.upsample2_fwd(small),
        "upsample2 bwd": lambda m: m.upsample2_bwd(x),
    }


def flownet_step(size, rng):
    params = ParamSet(0)
    net = FlowNet(params)
    i0 = Tensor(rng.uniform(size=(6, 1, size, size)).astype(np.float32))
    i1 = Tensor(rng.uniform(size=(6, 1, size, size)).astype(np.float32))

    def run(_):
        pair = net(i0, i1)
        backward(pair.forward.mean() + pair.backward.mean(), params)
    return run


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    found = kernels.backends()
    if "cython" not in found:
        print("compiled extension not built; only the numpy fallback is available")
    names = list(found)
    cases = kernel_cases(args.size, rng)
    cases["FlowNet fwd+bwd"] = flownet_step(args.size, rng)
    print(f"{'kernel':<18}" + "".join(f"{n + ' ms':>12}" for n in names) + (f"{'speedup':>10}" if len(names) > 1 else ""))
    saved = kernels._impl
    try:
        for label, fn in cases.items():
            times = []
            for n in names:
                kernels._impl = found[n]
                times.append(best_of(lambda: fn(found[n]), args.repeat) * 1e3)
            row = f"{label:<18}" + "".join(f"{t:>12.2f}" for t in times)
            if len(times) > 1:
                row += f"{times[0] / times[1]:>9.1f}x"
            print(row)
    finally:
        kernels._impl = saved


if __name__ == "__main__":
    main()
