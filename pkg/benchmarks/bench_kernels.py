"""Compare the compiled and numpy kernel backends on representative shapes.

    python3 benchmarks/bench_kernels.py [--reps 30] [--channels 64]

Prints one row per kernel: median milliseconds per backend, the speedup of
the compiled backend, and the max abs difference between the two outputs.
"""
import argparse
import sys

import numpy as np

from schemesearch import kernels
from schemesearch.latency.bench import conv_layer, microbench
from schemesearch.latency.executors import TuningParams, build_executor
from schemesearch.pruning import project
from schemesearch.space import PruningType


def cases(c: int, size: int, rng):
    xpad = rng.normal(size=(c, size + 2, size + 2)).astype(np.float32)
    th = tw = size // 2
    v = rng.normal(size=(16, c, th * tw)).astype(np.float32)
    m = rng.normal(size=(16, c, th * tw)).astype(np.float32)

    layer = conv_layer(c, c, size)
    w = rng.normal(size=layer.weight_shape()).astype(np.float32)
    ex = build_executor(layer, w, None, project(w, PruningType.PATTERN, 0.7),
                        params=TuningParams(16, 4))
    out_shape = (c, size, size)

    def pattern(mod):
        out = np.zeros(out_shape, dtype=np.float32)
        return mod.pattern_conv(xpad, out, ex.k_out, ex.k_in, ex.tap_off, ex.tap_w, 1, 16, 4)

    return {
        "im2col": lambda mod: mod.im2col(xpad, 3, 1, size, size),
        "winograd_input": lambda mod: mod.winograd_input(xpad, th, tw),
        "winograd_output": lambda mod: mod.winograd_output(m.reshape(16, c, th * tw), th, tw),
        "pattern_conv": pattern,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=30)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backs = kernels.backends()
    if "cython" not in backs:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    rows = []
    for name, fn in cases(args.channels, args.size, rng).items():
        ms, outs = {}, {}
        for bname, mod in backs.items():
            outs[bname] = np.asarray(fn(mod))
            ms[bname] = microbench(fn, mod, reps=args.reps).median_ms
        py = ms["python"]
        cy = ms.get("cython")
        diff = float(np.max(np.abs(outs["cython"] - outs["python"]))) if cy is not None else None
        rows.append((name, py, cy, None if cy is None else py / cy, diff))

    print(f"{'kernel':<16} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, py, cy, sp, diff in rows:
        fmt = lambda v, f: "-" if v is None else format(v, f)
        print(f"{name:<16} {py:>10.3f} {fmt(cy, '10.3f'):>10} {fmt(sp, '8.2f'):>8} "
              f"{fmt(diff, '10.2e'):>10}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
