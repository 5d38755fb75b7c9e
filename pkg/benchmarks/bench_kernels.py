"""Time the numba and numpy backends on the training hot spots.

    python3 benchmarks/bench_kernels.py [--batch 32] [--size 50] [--kernel 7]
"""
import argparse
import timeit

import numpy as np

from bimonn import _kernels
from bimonn.datasets import DiskorectConfig, diskorect_image


def shape_rows(n_images, seed=0):
    """Shape tables as the Diskorect generator would draw them."""
    cfg = DiskorectConfig(seed=seed)
    tables = []
    for i in range(n_images):
        _, info = diskorect_image(cfg, i, return_shapes=True)
        rows = []
        for s in info["shapes"]:
            if s[0] == "rectangle":
                rows.append((0, *s[1], *s[2], s[3]))
            else:
                rows.append((1, *s[1], s[2], 0, 0))
        tables.append(np.array(rows, dtype=np.float64))
    return tables


def bench(fn, repeat):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=50)
    ap.add_argument("--kernel", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.random((args.batch, args.size, args.size))
    k = rng.random((args.kernel, args.kernel))
    g = rng.random(x.shape)
    tables = shape_rows(args.batch)

    names = [n for n in ("numba", "numpy") if n in _kernels.BACKENDS]
    results = {}
    for name in names:
        corr, wgrad, raster = _kernels.BACKENDS[name]
        results[name] = {
            "correlate": bench(lambda: corr(x, k), args.repeat),
            "weight_grad": bench(lambda: wgrad(g, x, k.shape), args.repeat),
            "rasterize": bench(lambda: [raster(args.size, t) for t in tables], args.repeat),
        }
    if len(names) == 2:
        assert np.array_equal(_kernels.BACKENDS["numba"][0](x, k), _kernels.BACKENDS["numpy"][0](x, k))

    print(f"batch {args.batch} x {args.size}x{args.size}, kernel {args.kernel}x{args.kernel} (ms, best of {args.repeat})")
    print(f"{'kernel':<12}" + "".join(f"{n:>10}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for op in ("correlate", "weight_grad", "rasterize"):
        line = f"{op:<12}" + "".join(f"{results[n][op]:>10.2f}" for n in names)
        if len(names) == 2:
            line += f"{results['numpy'][op] / results['numba'][op]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
