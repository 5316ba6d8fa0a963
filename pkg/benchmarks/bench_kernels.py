"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror a desk run: batches of 16 through a 20-128-10 network, Adam on
the same parameter vector, and conformal scoring of 500 validation rows.
"""

import argparse
import time

import numpy as np

from fedtype import _kernels
from fedtype.nn import init_network


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation for the numba path
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    net = init_network([20, 128, 10], seed=0)
    dims = net._dims_arr
    X = rng.standard_normal((16, 20))
    G = rng.standard_normal((16, 10))
    g = rng.standard_normal(net.n_params)
    probs = rng.dirichlet(np.ones(10), size=500)
    labels = rng.integers(0, 10, 500)
    u = rng.random(500)
    acts = _kernels.dense_forward_np(net.params, dims, X)

    def adam(suffix):
        p, m, v = net.params.copy(), np.zeros(net.n_params), np.zeros(net.n_params)
        f = getattr(_kernels, "adam_update" + suffix)
        return lambda: f(p, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8)

    return {
        "dense_forward (16x20 -> 128 -> 10)": lambda s: (lambda: getattr(_kernels, "dense_forward" + s)(net.params, dims, X)),
        "dense_backward (16 rows)": lambda s: (lambda: getattr(_kernels, "dense_backward" + s)(net.params, dims, acts, G)),
        "adam_update (3978 params)": adam,
        "raps_label_scores (500x10)": lambda s: (lambda: getattr(_kernels, "raps_label_scores" + s)(probs, labels, u, 0.5, 5)),
        "raps_set_mask (500x10)": lambda s: (lambda: getattr(_kernels, "raps_set_mask" + s)(probs, u, 0.5, 5, 0.9)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        t_np = best_of(make("_np"), args.repeat)
        t_nb = best_of(make("_nb"), args.repeat)
        print(f"{name:38s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
