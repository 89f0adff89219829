"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes match the first stage of the default desk network (batch 8, 32x32
frames).  Each row reports the median wall time per call and the speedup.
"""

import argparse
import time

import numpy as np

from tristream import _kernels as K
from tristream.tensor import conv_output_size


def _median_time(fn, repeat):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    x = rng.standard_normal((8, 8, 8, 18, 18)).astype(np.float32)  # padded conv input
    ksize, stride, dil = (3, 3, 3), (1, 1, 1), (1, 1, 1)
    out = conv_output_size(x.shape[2:], ksize, stride, (0, 0, 0), dil)
    cols = K.vol2col_numpy(x, ksize, stride, dil, out)
    pool_in = rng.standard_normal((8, 8, 8, 32, 32)).astype(np.float32)
    pool_out = (8, 16, 16)
    _, arg = K.maxpool3d_forward_numpy(pool_in, (1, 2, 2), (1, 2, 2), pool_out)
    gpool = rng.standard_normal((8, 8) + pool_out).astype(np.float32)
    feat = rng.standard_normal((4, 32, 4, 8, 8)).astype(np.float32)
    rois = np.array([[i % 4, 0.5, 1.0, 6.0, 7.5] for i in range(16)])
    groi = rng.standard_normal((16, 32, 4, 7, 7)).astype(np.float32)
    return {
        "vol2col": lambda f: f(x, ksize, stride, dil, out),
        "col2vol": lambda f: f(cols, x.shape, stride, dil),
        "maxpool3d_forward": lambda f: f(pool_in, (1, 2, 2), (1, 2, 2), pool_out),
        "maxpool3d_backward": lambda f: f(gpool, arg, pool_in.shape),
        "roi_align_forward": lambda f: f(feat, rois, 7, 7),
        "roi_align_backward": lambda f: f(groi, rois, feat.shape),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in cases(rng).items():
        t_np = _median_time(lambda: call(K.IMPLEMENTATIONS["numpy"][name]), args.repeat)
        t_nb = _median_time(lambda: call(K.IMPLEMENTATIONS["numba"][name]), args.repeat)
        print(f"{name:22s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
