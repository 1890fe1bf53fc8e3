"""Compare the numba kernels against their pure-numpy twins.

Run: python3 benchmarks/bench_kernels.py --repeats 5
Prints one line per kernel: best-of-N milliseconds for each backend and the speedup.
"""
import argparse
import time

import numpy as np

from gradlime import datagen, kernels, segmentation
from gradlime.tensor import rgb_to_lab


def _cases():
    x = datagen.gen_shapes_2d(1, 0)[0].input
    clip = datagen.gen_moving_shapes_3d(1, 0)[0].input
    p = segmentation.QuickShiftParams()
    feat, dens = segmentation.quickshift_density(x, p)
    h, w = x.shape[1:]

    lab = rgb_to_lab(clip)
    feat3 = lab.reshape(3, -1).T.astype(np.float64)
    dims = lab.shape[1:]
    coords = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"), -1).reshape(-1, 3)
    _, centres = segmentation._slic_core(lab, segmentation.SlicParams(k=50), 3)
    radius = np.array([8.0, 8.0, 8.0])

    rng = np.random.default_rng(0)
    # conv2 backward of Net3D at batch 4: 16x16x16 positions, 3x3x3x16 window
    dcols = rng.standard_normal((4 * 16 * 16 * 16, 27 * 16)).astype(np.float32)
    labels = segmentation.slic_3d(clip).labels.astype(np.int64)

    return {
        "col2im": (dcols, 4, 16, 16, 16, 3, 3, 3, 16),
        "slic_assign": (feat3, coords, centres, radius, (10.0 / 5.0) ** 2),
        "qs_density": (feat, h, w, 9, 1.0 / 18.0),
        "qs_parents": (feat, dens, h, w, 6, 36.0),
        "components": (np.ascontiguousarray(labels),),
    }


def best_ms(func, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        func(*args)
        times.append(time.perf_counter() - t0)
    return 1000.0 * min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--kernels", default=",".join(kernels.KERNEL_NAMES))
    args = ap.parse_args()

    cases = _cases()
    print(f"{'kernel':<12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name in args.kernels.split(","):
        fast, slow = kernels.pick(name, "numba"), kernels.pick(name, "numpy")
        fast(*cases[name])  # compile (or load from cache) outside the timing
        t_nb = best_ms(fast, cases[name], args.repeats)
        t_np = best_ms(slow, cases[name], args.repeats)
        print(f"{name:<12} {t_nb:>10.2f} {t_np:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
