"""Shared oracles and case generators for the test suite."""
import math

import numpy as np
from scipy.special import betaln

from msurv.measure import ModelParams
from msurv.statespace import Partition, build_graph, validate


def random_dislocation_cases(rng, n):
    """Random (r, d, gamma, rho) with r <= 20, 1 <= D <= 4, gamma and rho in [0.2, 5]."""
    cases = []
    while len(cases) < n:
        k = int(rng.integers(1, 4))
        r = rng.integers(0, 21, size=k)
        d = np.zeros(k, dtype=int)
        for _ in range(int(rng.integers(1, 5))):
            d[rng.integers(k)] += 1
        g = rng.uniform(0.2, 5.0, size=k)
        rho = float(rng.uniform(0.2, 5.0))
        cases.append((r.tolist(), d.tolist(), g.tolist(), rho))
    return cases


def beta_value(r, d, rho):
    """Closed form of the dislocation integral when every gamma is 1."""
    return math.exp(betaln(rho + sum(r), sum(d)))


def graph_params(name, partition=None, seed=0):
    """Random parameters on a builtin graph for normalisation checks."""
    rng = np.random.default_rng(seed)
    st = validate(build_graph(name), partition)
    nu = {p.key: float(rng.uniform(0.3, 2.0)) for p in st.pairs}
    gamma = {(l, p.key[1]): float(rng.uniform(0.4, 2.5)) for p in st.pairs for l in p.sources if l != p.reference}
    alpha = {}
    for p in st.pairs:
        for l in p.sources:
            w = rng.dirichlet(np.ones(len(p.dests[l])))
            alpha.update({(l, m): float(x) for m, x in zip(p.dests[l], w)})
    return ModelParams.create(st, nu=nu, rho=float(rng.uniform(0.5, 2.0)), gamma=gamma, alpha=alpha)


STUDY_PARTITION = Partition(((1, 2), (3,)))
CAV_PARTITION = Partition(((1, 2, 3), (4,)))


ACCEPTANCE_LINES = []


def report(label, ok, detail=""):
    """Record and print one acceptance line; the terminal summary repeats them."""
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
