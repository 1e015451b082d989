"""Compiled vs numpy kernels on the two hot paths.

Times survival-forest growth (log-rank split search) and one imputation
forest (CART growth plus prediction) with each backend on the same inputs,
and reports whether the outputs agree.

    python benchmarks/bench_kernels.py [--n 1000] [--trees 50]
"""
import argparse
import time

import numpy as np

from crsurv.forest import _backend, cart, rsf
from crsurv.synth import SynthConfig, synth_cohort


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--M", type=int, default=65)
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if _backend.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    backends = {"compiled": _backend.compiled, "python": _backend.python}

    half = args.M // 2
    cfg = SynthConfig(n=args.n, n_binary=half, n_continuous=args.M - half,
                      beta_dementia=(0.5,) + (0.0,) * (args.M - 1), seed=1)
    data = rsf.SurvivalData.from_subjects(synth_cohort(cfg).subjects)
    fcfg = rsf.ForestConfig(n_trees=args.trees, seed=3)

    rng = np.random.default_rng(0)
    X = rng.standard_normal((args.n, 10))
    X[:, 0] += X[:, 1:4].sum(axis=1)
    train, query = np.arange(0, args.n, 2), np.arange(1, args.n, 2)

    print(f"n={args.n} M={args.M} trees={args.trees} (best of {args.repeat})")
    print(f"{'task':<28}{'compiled s':>12}{'python s':>12}{'speedup':>10}  agree")
    rows = {}
    for name, k in backends.items():
        t_rsf, forest = timed(lambda: rsf.grow_forest(data, fcfg, kernels=k), args.repeat)
        t_cart, pred = timed(
            lambda: cart.forest_predict(X, 0, np.arange(1, 10), train, query, n_trees=args.trees * 10, kernels=k),
            args.repeat,
        )
        rows[name] = (t_rsf, forest, t_cart, pred)

    c, p = rows["compiled"], rows["python"]
    err_c = rsf.oob_error(c[1])
    err_p = rsf.oob_error(p[1])
    print(f"{'survival forest grow':<28}{c[0]:>12.3f}{p[0]:>12.3f}{p[0] / c[0]:>10.1f}  "
          f"OOB error {err_c:.4f} vs {err_p:.4f}")
    print(f"{'imputation forest':<28}{c[2]:>12.3f}{p[2]:>12.3f}{p[2] / c[2]:>10.1f}  "
          f"bit-identical {np.array_equal(c[3], p[3])}")


if __name__ == "__main__":
    main()
