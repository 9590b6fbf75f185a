"""Compare the numba kernels against the numpy fallback.

Prints one row per kernel plus an end-to-end forward pass of a small
residual net under each backend.  Usage::

    python3 scripts/bench_kernels.py --batch 16 --channels 32 --size 32
"""

import argparse
import json
import time

import numpy as np

from tinyprune import _accel, bench, engine, zoo


def forward_ms(backend, batch, repeats):
    g = zoo.build_architecture("resnet14", "cifar", widths=(16, 32, 64))
    x = np.random.default_rng(0).standard_normal((batch, 3, 32, 32)).astype(np.float32)
    with _accel.backend(backend):
        engine.forward(g, x)  # compile / warm caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            engine.forward(g, x)
            times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    args = ap.parse_args()

    rows = bench.kernel_benchmark(args.batch, args.channels, args.size, args.repeats)
    rows.append({"kernel": "resnet14 forward", "numba_ms": forward_ms("numba", args.batch, args.repeats),
                 "numpy_ms": forward_ms("numpy", args.batch, args.repeats), "max_abs_diff": None})
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numba_ms']:>10.2f}{r['numpy_ms']:>10.2f}{r['numpy_ms'] / r['numba_ms']:>8.2f}x")


if __name__ == "__main__":
    main()
