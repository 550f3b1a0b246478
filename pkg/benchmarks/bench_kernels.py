"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-N wall time for one SGD epoch and one batched forward
pass at the reference teacher and student sizes, plus the speedup.
"""

import argparse
import timeit

import numpy as np

from cascade_distill import _backend, _kernels_py, nn

CASES = [
    ("student 16-6-10", (16, 6, 10)),
    ("teacher 16-128-128-10", (16, 128, 128, 10)),
]
N, BATCH = 20_000, 64


def bench(kernels, widths, repeat):
    rng = np.random.default_rng(0)
    params0 = nn.init_network(widths, 0).params.copy()
    X = rng.normal(size=(N, widths[0]))
    T = np.eye(widths[-1])[rng.integers(0, widths[-1], N)]
    order = rng.permutation(N).astype(np.int64)

    def epoch():
        kernels.sgd_epoch(params0.copy(), widths, X, T, order, 0.05, 1.0, BATCH)

    def forward():
        kernels.forward(params0, widths, X)

    return (min(timeit.repeat(epoch, number=1, repeat=repeat)),
            min(timeit.repeat(forward, number=1, repeat=repeat)))


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _backend.HAVE_COMPILED:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    compiled = _backend.get("compiled")
    print(f"n={N}, batch={BATCH}, best of {args.repeat}")
    print(f"{'network':<24}{'op':<10}{'python s':>10}{'compiled s':>12}{'speedup':>9}")
    for label, widths in CASES:
        py = bench(_kernels_py, widths, args.repeat)
        cc = bench(compiled, widths, args.repeat)
        for op, p, c in zip(("epoch", "forward"), py, cc):
            print(f"{label:<24}{op:<10}{p:>10.4f}{c:>12.4f}{p / c:>8.1f}x")


if __name__ == "__main__":
    main()
