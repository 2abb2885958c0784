"""Timing comparison of the numba and numpy kernel backends.

Each hot kernel is run on a representative workload under both backends
(same inputs), outputs are cross-checked, and median wall times are
reported with the speedup factor. A composite row times a full desk
backbone forward/backward pass, which exercises im2col and col2im the
way training does.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from mono3d import kernels
from mono3d import tensor as T
from mono3d.model import Detector
from mono3d.tensor import Tensor


def _bilinear_args(rng, n, c, h, w, oh, ow):
    ys = rng.uniform(0.0, h - 1.0, size=oh)
    xs = rng.uniform(0.0, w - 1.0, size=ow)
    iy0 = np.floor(ys).astype(np.int64)
    ix0 = np.floor(xs).astype(np.int64)
    iy1 = np.minimum(iy0 + 1, h - 1)
    ix1 = np.minimum(ix0 + 1, w - 1)
    return iy0, iy1, ys - iy0, ix0, ix1, xs - ix0


def build_workloads(quick):
    rng = np.random.default_rng(0)
    scale = 2 if quick else 1

    n, c, hp, wp = 4, 32, 66 // scale + 2, 66 // scale + 2
    oh = ow = hp - 2
    xp = rng.normal(size=(n, c, hp, wp))
    cols = rng.normal(size=(n, c, 9, oh * ow))

    gh, gw = 96 // scale, 96 // scale
    feat = rng.normal(size=(2, 64, gh, gw))
    grid = _bilinear_args(rng, 2, 64, gh, gw, 56, 56)
    gout = rng.normal(size=(2, 64, 56, 56))

    n_pairs = 64 // scale
    boxes_a = np.column_stack(
        [
            rng.uniform(-10, 10, n_pairs),
            rng.uniform(5, 40, n_pairs),
            rng.uniform(1.2, 2.4, n_pairs),
            rng.uniform(0.6, 1.1, n_pairs),
            rng.uniform(-np.pi, np.pi, n_pairs),
        ]
    )
    boxes_b = boxes_a + rng.normal(scale=0.4, size=boxes_a.shape)

    return [
        ("im2col", lambda: kernels.im2col(xp, 3, 3, 1, 1, oh, ow)),
        ("col2im", lambda: kernels.col2im(cols, hp, wp, 3, 3, 1, 1, oh, ow)),
        ("bilinear_gather", lambda: kernels.bilinear_gather(feat, *grid)),
        ("bilinear_scatter", lambda: kernels.bilinear_scatter(gout, *grid, gh, gw)),
        ("raster_iou", lambda: kernels.raster_iou(boxes_a, boxes_b, 256 // scale)),
        ("desk_fwd_bwd", _desk_step(quick)),
    ]


def _desk_step(quick):
    det = Detector("desk", seed=0)
    h, w = (64, 128) if quick else (128, 256)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 3, h, w)))

    def run():
        feats = det.features(x)
        loss = T.sum_(feats[0] ** 2.0)
        T.backward(loss)
        out = feats[0].data.copy()
        det.zero_grads()
        T.reset_tape()
        return out

    return run


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    args = ap.parse_args()

    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.append("numba")
    except RuntimeError as exc:
        print(f"numba backend unavailable ({exc}); timing numpy only")

    rows = []
    for name, fn in build_workloads(args.quick):
        results = {}
        for backend in backends:
            kernels.set_backend(backend)
            fn()  # warmup; also triggers JIT compilation for numba
            results[backend] = (_median_time(fn, args.repeats), fn())
        if len(backends) == 2:
            diff = float(np.max(np.abs(results["numba"][1] - results["numpy"][1])))
            speedup = results["numpy"][0] / results["numba"][0]
        else:
            diff, speedup = 0.0, float("nan")
        rows.append((name, results, diff, speedup))

    width = max(len(r[0]) for r in rows)
    header = f"{'kernel'.ljust(width)}  numpy[ms]  numba[ms]  speedup  max|diff|"
    print(header)
    print("-" * len(header))
    for name, results, diff, speedup in rows:
        t_np = results["numpy"][0] * 1e3
        t_nb = results.get("numba", (float("nan"),))[0] * 1e3
        print(f"{name.ljust(width)}  {t_np:9.3f}  {t_nb:9.3f}  {speedup:6.2f}x  {diff:.3e}")
    kernels.set_backend("auto")


if __name__ == "__main__":
    main()
