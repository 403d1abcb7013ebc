"""Compare the compiled NMS kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 128,512,2048] [--repeat 5]

Both backends are imported side by side (the fallback module is always
importable; the compiled one only when the extension was built).  Outputs are
checked for equality before timing.
"""
import argparse
import time

import numpy as np

from daedalus._kernels import _pure

try:
    from daedalus._kernels import _nms as _compiled
except ImportError:  # extension not built
    _compiled = None


def random_boxes(rng, n, side=64.0):
    cx, cy = rng.uniform(0, side, n), rng.uniform(0, side, n)
    w, h = rng.uniform(2, side / 2, n), rng.uniform(2, side / 2, n)
    x1, y1 = cx - w / 2, cy - h / 2
    return x1, y1, x1 + w, y1 + h, rng.random(n)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(x1, y1, x2, y2, scores):
    order = np.argsort(-scores, kind="stable").astype(np.intp)
    return {
        "iou_matrix": lambda k: k.iou_matrix(x1, y1, x2, y2, x1, y1, x2, y2),
        "nms": lambda k: k.nms_sorted(x1, y1, x2, y2, order, 0.5),
        "soft_nms_linear": lambda k: k.soft_nms(x1, y1, x2, y2, scores, 0.5, 0, 0.5, 0.001),
        "soft_nms_gaussian": lambda k: k.soft_nms(x1, y1, x2, y2, scores, 0.5, 1, 0.5, 0.001),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="128,512,2048")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18} {'n':>6} {'pure ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        boxes = random_boxes(rng, n)
        for name, call in cases(*boxes).items():
            ref = call(_pure)
            t_pure = best_of(lambda: call(_pure), args.repeat)
            if _compiled is None:
                print(f"{name:<18} {n:>6} {1e3 * t_pure:>10.3f} {'n/a':>10} {'':>8}")
                continue
            got = call(_compiled)
            for a, b in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
                if not np.array_equal(np.asarray(a), np.asarray(b)):
                    raise SystemExit(f"{name} n={n}: backends disagree")
            t_c = best_of(lambda: call(_compiled), args.repeat)
            print(f"{name:<18} {n:>6} {1e3 * t_pure:>10.3f} {1e3 * t_c:>10.3f} {t_pure / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
