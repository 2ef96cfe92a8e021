import math

import mpmath
import numpy as np
import pytest

from msurv import _pykernels, kernels
from msurv.measure import quadrature_oracle

from helpers import beta_value, random_dislocation_cases

try:
    from msurv import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

BACKENDS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def impl(request):
    return request.param


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("x", [1e-3, 0.1, 0.5, 1.0, 2.0, 3.7, 7.99, 8.0, 25.0, 1e3, 1e8])
def test_digamma_matches_mpmath(impl, x):
    want = float(mpmath.digamma(x))
    assert abs(impl.digamma(x) - want) < 1e-12 * max(1.0, abs(want))


def test_digamma_euler_constant(impl):
    assert impl.digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-14)
    assert impl.digamma(2.0) - impl.digamma(1.0) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("x", [0.0, -1.0])
def test_digamma_domain(impl, x):
    with pytest.raises(ValueError):
        impl.digamma(x)


@pytest.mark.parametrize("x,h", [(1.0, 1.0), (0.3, 1e-9), (1e6, 0.5), (2.5, 40.0), (5.0, 0.0)])
def test_digamma_diff_no_cancellation(impl, x, h):
    with mpmath.workdps(50):
        want = float(mpmath.digamma(mpmath.mpf(x) + h) - mpmath.digamma(x))
    got = impl.digamma_diff(x, h)
    assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


def test_digamma_array(impl):
    xs = np.array([0.25, 1.0, 9.5, 100.0])
    want = [float(mpmath.digamma(x)) for x in xs]
    np.testing.assert_allclose(impl.digamma_array(xs), want, rtol=1e-13)


def test_series_matches_beta(impl):
    for r, d, rho in [([2], [1], 1.0), ([1], [2], 1.0), ([0], [1], 1.0), ([3, 4], [1, 2], 0.7)]:
        v, _ = impl.dislocation_series(r, d, [1.0] * len(r), rho)
        assert v == pytest.approx(beta_value(r, d, rho), rel=1e-12)


def test_series_examples(impl):
    assert impl.dislocation_series([2], [1], [1.0], 1.0)[0] == pytest.approx(1 / 3, rel=1e-14)
    assert impl.dislocation_series([1], [2], [1.0], 1.0)[0] == pytest.approx(1 / 6, rel=1e-14)


def test_series_rejects_no_move(impl):
    with pytest.raises(ValueError):
        impl.dislocation_series([2], [0], [1.0], 1.0)


def test_quadrature_branch_matches_oracle(impl):
    # large D forces the quadrature path
    r, d, g, rho = [30, 12], [9, 8], [1.3, 0.6], 0.8
    got = impl.log_dislocation_quad(r, d, g, rho)
    assert got == pytest.approx(math.log(quadrature_oracle(r, d, g, rho)), rel=1e-9)


def test_log_integral_dispatch_random(impl):
    rng = np.random.default_rng(7)
    for r, d, g, rho in random_dislocation_cases(rng, 60):
        want = quadrature_oracle(r, d, g, rho)
        assert math.exp(impl.log_dislocation_integral(r, d, g, rho)) == pytest.approx(want, rel=1e-8)


def test_backends_agree():
    if _ckernels is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(11)
    for r, d, g, rho in random_dislocation_cases(rng, 100):
        a = _pykernels.log_dislocation_integral(r, d, g, rho)
        b = _ckernels.log_dislocation_integral(r, d, g, rho)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def _brute_filter(init, mats, masks):
    a = np.asarray(init, dtype=float)
    for M, m in zip(mats, masks):
        a = (a @ M) * m
    return a


def test_forward_filter_against_brute_force(impl):
    rng = np.random.default_rng(3)
    s, K = 3, 6
    mats = rng.dirichlet(np.ones(s), size=(K, s))
    masks = (rng.random((K, s)) < 0.8).astype(float)
    masks[:, 0] = 1.0
    init = np.array([0.2, 0.5, 0.3])
    alphas, logz = impl.forward_filter(init, mats, masks)
    unnorm = _brute_filter(init, mats, masks)
    assert logz == pytest.approx(math.log(unnorm.sum()), rel=1e-12)
    np.testing.assert_allclose(alphas[-1], unnorm / unnorm.sum(), rtol=1e-12)


def test_forward_filter_impossible(impl):
    mats = np.array([np.eye(2)])
    masks = np.array([[0.0, 1.0]])
    _, logz = impl.forward_filter(np.array([1.0, 0.0]), mats, masks)
    assert logz == -math.inf


def test_backward_sample_exact_law(impl):
    # two steps on two states: enumerate the joint law of the path
    mats = np.array([[[0.7, 0.3], [0.4, 0.6]], [[0.9, 0.1], [0.2, 0.8]]])
    masks = np.array([[1.0, 1.0], [0.0, 1.0]])
    init = np.array([1.0, 0.0])
    alphas, _ = impl.forward_filter(init, mats, masks)
    rng = np.random.default_rng(5)
    n = 20000
    hits = 0
    for _ in range(n):
        path = impl.backward_sample(alphas, mats, rng.random(3))
        assert path[0] == 0 and path[2] == 1
        hits += path[1] == 0
    # P(mid = 0 | end = 1) = 0.7*0.1 / (0.7*0.1 + 0.3*0.8)
    want = 0.07 / (0.07 + 0.24)
    assert abs(hits / n - want) < 4 * math.sqrt(want * (1 - want) / n)
