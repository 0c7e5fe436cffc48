"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are called directly, so the LEARNPRUNER_NUMBA flag does not
matter here.  The first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from learnpruner import _kernels as K


def timeit(fn, *args, repeat=20):
    fn(*args)  # warm-up / JIT
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    # decoder-sized attention: batch 16 x 4 heads, 66 tokens
    x = rng.normal(size=(64, 66, 66))
    keep = (rng.random((64, 66)) < 0.3).astype(np.float64)
    a, u, _ = K.np_pruned_softmax(x, keep, True)
    g = rng.normal(size=x.shape)
    unit = rng.normal(size=(576, 64))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    sel = np.zeros(576, dtype=bool)
    sel[:100] = True
    yield "pruned_softmax", K.np_pruned_softmax, K.nb_pruned_softmax, (x, keep, True)
    yield "pruned_softmax_grad", K.np_pruned_softmax_grad, K.nb_pruned_softmax_grad, (a, u, g)
    yield "greedy_maxmin", K.np_greedy_maxmin, K.nb_greedy_maxmin, (unit, sel, 12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for name, np_fn, nb_fn, inputs in cases(rng):
        t_np = timeit(np_fn, *inputs, repeat=args.repeat)
        t_nb = timeit(nb_fn, *inputs, repeat=args.repeat)
        print(f"{name:<22} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
