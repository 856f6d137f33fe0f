"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row times one call of ``score_grads`` or ``param_grads`` on a batch of
inputs through a softplus net; the best of ``--repeat`` runs is reported.
The last column is the size-based dispatch the package actually uses.
"""
import argparse
import timeit

import numpy as np

from rankshield import _fallback, backend
from rankshield._fallback import HEAD_PROB, MODE_XENT
from rankshield.model import Activation, DenseNet

try:
    from rankshield import _kernels
except ImportError:
    _kernels = None

CASES = [  # (features, hidden layers, batch)
    (16, (32,), 1),
    (16, (32,), 64),
    (16, (32,), 1024),
    (64, (128, 64), 256),
]


def bench(fn, args, repeat):
    number = max(1, int(2000 // max(1, args[5].shape[0])))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<12}{'n':>5}{'hidden':>12}{'batch':>7}{'python us':>12}"
          f"{'compiled us':>13}{'speedup':>9}{'dispatch us':>13}")
    for n, hidden, batch in CASES:
        net = DenseNet.initialize((n,) + hidden + (2,), Activation("softplus", 10.0), seed=1)
        X = rng.standard_normal((batch, n))
        cls = rng.integers(0, 2, batch).astype(np.int64)
        w = np.full(batch, 1.0 / batch)
        common = (net.params, net._dims_arr, net.activation.code, 10.0)
        for name, extra in (("score_grads", (HEAD_PROB, X, cls)),
                            ("param_grads", (MODE_XENT, X, cls, w))):
            call = common + extra
            py = bench(getattr(_fallback, name), call, args.repeat)
            row = f"{name:<12}{n:>5}{str(hidden):>12}{batch:>7}{py * 1e6:>12.1f}"
            if _kernels is not None:
                c = bench(getattr(_kernels, name), call, args.repeat)
                row += f"{c * 1e6:>13.1f}{py / c:>8.1f}x"
                row += f"{bench(getattr(backend, name), call, args.repeat) * 1e6:>13.1f}"
            print(row)


if __name__ == "__main__":
    main()
