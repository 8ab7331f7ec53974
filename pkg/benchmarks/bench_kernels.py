"""Time the compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
checked for identical output across backends before it is timed.
"""
import argparse
import timeit

import numpy as np

from iitrack import kernels


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(-30, 30, n), rng.uniform(-30, 30, n), rng.uniform(3, 6, n),
                            rng.uniform(1.5, 2.5, n), rng.uniform(-np.pi, np.pi, n)])


def cases(rng):
    a, b = random_boxes(rng, 24), random_boxes(rng, 24)
    score = rng.normal(size=(30, 30))
    occ = random_boxes(rng, 8)
    return {
        "hungarian_max 30x30": lambda: kernels.hungarian_max(score),
        "iou_matrix 24x24": lambda: kernels.iou_matrix(a, b),
        "iou_bev single": lambda: kernels.iou_bev(a[0], b[0]),
        "raycast_grid 64x64": lambda: kernels.raycast_grid(0.0, 0.0, occ, -32.0, -32.0, 0.0, 1.0, 64, 64),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    results = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            out = fn()
            t = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(label, {})[name] = (t, out)
    print(f"{'kernel':<22}" + "".join(f"{b:>14}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for label, per in results.items():
        row = f"{label:<22}" + "".join(f"{per[b][0] * 1e3:>12.3f}ms" for b in backends)
        if len(backends) > 1:
            outs = [per[b][1] for b in backends]
            same = all(np.array_equal(np.asarray(o[0] if isinstance(o, tuple) else o),
                                      np.asarray(outs[0][0] if isinstance(outs[0], tuple) else outs[0]))
                       for o in outs)
            row += f"  {per['python'][0] / per['compiled'][0]:>8.1f}x" + ("" if same else "  OUTPUT MISMATCH")
        print(row)
    kernels.use_backend(backends[0] if "compiled" not in backends else "compiled")


if __name__ == "__main__":
    main()
