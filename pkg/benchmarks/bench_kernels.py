"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on the same inputs in both backends; results agree to
rounding and the table reports the per-call time and the speed-up.
"""
import argparse
import timeit

import numpy as np

from msurv import _pykernels

try:
    from msurv import _ckernels
except ImportError:
    _ckernels = None


def _cases(seed=0, n=200):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        r = rng.integers(0, 40, size=k).tolist()
        d = rng.integers(0, 3, size=k)
        d[0] = max(d[0], 1)
        out.append((r, d.tolist(), rng.uniform(0.3, 3.0, size=k).tolist(), float(rng.uniform(0.3, 3.0))))
    return out


def _filter_inputs(seed=1, K=400, s=3):
    rng = np.random.default_rng(seed)
    mats = rng.random((K, s, s))
    mats /= mats.sum(axis=2, keepdims=True)
    masks = np.ones((K, s))
    init = np.eye(s)[0]
    return init, mats, masks, rng.random(K + 1)


def workloads():
    cases = _cases()
    xs = np.linspace(0.05, 60.0, 500)
    init, mats, masks, us = _filter_inputs()

    def integral(m):
        for r, d, g, rho in cases:
            m.log_dislocation_integral(r, d, g, rho)

    def digamma(m):
        for x in xs:
            m.digamma_diff(1.0, x)

    def ffbs(m):
        alphas, _ = m.forward_filter(init, mats, masks)
        m.backward_sample(alphas, mats, us)

    return {"dislocation integral (200 cases)": integral,
            "digamma difference (500 points)": digamma,
            "forward filter + backward sample (K=400)": ffbs}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':44s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("    speed-up" if _ckernels else ""))
    for label, fn in workloads().items():
        times = [min(timeit.repeat(lambda m=m: fn(m), number=1, repeat=args.repeat)) for _, m in backends]
        row = f"{label:44s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
