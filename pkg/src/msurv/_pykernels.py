"""Pure-Python implementations of the numerical kernels.

These mirror ``_ckernels.pyx`` function for function and are used when the
compiled extension is unavailable (or ``MSURV_PURE_PYTHON`` is set).
"""
from __future__ import annotations

import math

import numpy as np

# Bernoulli-number coefficients of the asymptotic digamma expansion.
_ASYMPTOTIC = (
    1.0 / 12.0,
    1.0 / 120.0,
    1.0 / 252.0,
    1.0 / 240.0,
    1.0 / 132.0,
    691.0 / 32760.0,
    1.0 / 12.0,
)

MAX_SERIES_TERMS = 512
SERIES_RTOL = 1e-11


def digamma(x: float) -> float:
    """Digamma function for positive real ``x``."""
    if not x > 0.0:
        raise ValueError(f"digamma requires x > 0, got {x!r}")
    acc = 0.0
    while x < 8.0:
        acc -= 1.0 / x
        x += 1.0
    r2 = 1.0 / (x * x)
    c = _ASYMPTOTIC
    tail = r2 * (c[0] - r2 * (c[1] - r2 * (c[2] - r2 * (c[3] - r2 * (c[4] - r2 * (c[5] - r2 * c[6]))))))
    return acc + math.log(x) - 0.5 / x - tail


def _tail(x: float) -> float:
    r2 = 1.0 / (x * x)
    c = _ASYMPTOTIC
    return r2 * (c[0] - r2 * (c[1] - r2 * (c[2] - r2 * (c[3] - r2 * (c[4] - r2 * (c[5] - r2 * c[6]))))))


def digamma_diff(x: float, h: float) -> float:
    """``digamma(x + h) - digamma(x)`` without subtractive cancellation (h >= 0)."""
    if not x > 0.0:
        raise ValueError(f"digamma requires x > 0, got {x!r}")
    acc = 0.0
    while x < 8.0:
        acc += h / (x * (x + h))
        x += 1.0
    y = x + h
    return acc + math.log1p(h / x) + 0.5 * h / (x * y) - (_tail(y) - _tail(x))


def digamma_array(x) -> np.ndarray:
    x = np.array(x, dtype=float, copy=True)
    if x.size and not np.all(x > 0.0):
        raise ValueError("digamma requires x > 0")
    acc = np.zeros_like(x)
    small = x < 8.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 8.0
    r2 = 1.0 / (x * x)
    c = _ASYMPTOTIC
    tail = r2 * (c[0] - r2 * (c[1] - r2 * (c[2] - r2 * (c[3] - r2 * (c[4] - r2 * (c[5] - r2 * c[6]))))))
    return acc + np.log(x) - 0.5 / x - tail


def _prepare(r, d, g):
    r = [int(v) for v in r]
    d = [int(v) for v in d]
    g = [float(v) for v in g]
    if not (len(r) == len(d) == len(g)):
        raise ValueError("r, d and gamma must have equal length")
    if any(v < 0 for v in r) or any(v < 0 for v in d):
        raise ValueError("counts must be non-negative")
    if sum(d) < 1:
        raise ValueError("at least one unit must move (D >= 1)")
    return r, d, g


def dislocation_series(r, d, g, rho: float) -> tuple[float, float]:
    """Alternating digamma sum for the dislocation integral.

    Returns ``(value, abs_error_estimate)``. Every term is paired against the
    ``k = 0`` term so the constant digamma offset cancels exactly.
    """
    r, d, g = _prepare(r, d, g)
    base = rho + sum(gl * rl for gl, rl in zip(g, r))
    total = 0.0
    err = 0.0
    k = [0] * len(d)
    while True:
        # advance mixed-radix counter; k = 0 contributes nothing
        pos = 0
        while pos < len(d):
            if k[pos] < d[pos]:
                k[pos] += 1
                break
            k[pos] = 0
            pos += 1
        if pos == len(d):
            break
        coef = 1.0
        shift = 0.0
        parity = 0
        for dl, kl, gl in zip(d, k, g):
            if kl:
                coef *= math.comb(dl, kl)
                shift += gl * kl
                parity += kl
        term = coef * digamma_diff(base, shift)
        total += term if parity % 2 else -term
        err += term
    return total, 8.0 * 2.220446049250313e-16 * err


def _log1mexp(x: float) -> float:
    """log(1 - exp(-x)) for x > 0."""
    if x < 0.6931471805599453:
        return math.log(-math.expm1(-x))
    return math.log1p(-math.exp(-x))


def _logf(v, a, d, g):
    u = math.exp(v)
    out = v - a * u - _log1mexp(u)
    for dl, gl in zip(d, g):
        if dl:
            out += dl * _log1mexp(gl * u)
    return out


def _dlogf(v, a, d, g):
    u = math.exp(v)
    out = 1.0 - a * u - (u / math.expm1(u) if u > 1e-300 else 1.0)
    for dl, gl in zip(d, g):
        if dl:
            z = gl * u
            out += dl * (z / math.expm1(z) if z > 1e-300 else 1.0)
    return out


def log_dislocation_quad(r, d, g, rho: float) -> float:
    """Log of the dislocation integral by trapezoidal quadrature in ``log(-log p)``.

    The integrand is analytic in a strip around the real axis and decays
    exponentially on the left and double-exponentially on the right, so the
    trapezoid rule converges geometrically in the step size.
    """
    r, d, g = _prepare(r, d, g)
    a = rho + sum(gl * rl for gl, rl in zip(g, r))
    lo, hi = -60.0, 0.0
    while _dlogf(hi, a, d, g) > 0.0:
        hi += 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _dlogf(mid, a, d, g) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    vstar = 0.5 * (lo + hi)
    delta = 1e-4
    curv = -(_dlogf(vstar + delta, a, d, g) - _dlogf(vstar - delta, a, d, g)) / (2 * delta)
    sigma = 1.0 / math.sqrt(curv) if curv > 0 else 1.0
    h = min(0.125, sigma / 4.0)
    fmax = _logf(vstar, a, d, g)
    total = 1.0
    for direction in (-1.0, 1.0):
        step = 1
        while step < 100000:
            val = _logf(vstar + direction * step * h, a, d, g) - fmax
            total += math.exp(val)
            if val < -40.0:
                break
            step += 1
    return fmax + math.log(total * h)


def log_dislocation_integral(r, d, g, rho: float) -> float:
    """Log of the dislocation integral, choosing the most accurate route.

    Closed Beta form when every moving state has unit log-risk, the digamma
    series when it is short and well conditioned, quadrature otherwise.
    """
    r, d, g = _prepare(r, d, g)
    big_d = sum(d)
    if all(gl == 1.0 for dl, gl in zip(d, g) if dl):
        a = rho + sum(gl * rl for gl, rl in zip(g, r))
        return math.lgamma(a) + math.lgamma(big_d) - math.lgamma(a + big_d)
    nterms = 1
    for dl in d:
        nterms *= dl + 1
    if nterms <= MAX_SERIES_TERMS:
        value, err = dislocation_series(r, d, g, rho)
        if value > 0.0 and err <= SERIES_RTOL * value:
            return math.log(value)
    return log_dislocation_quad(r, d, g, rho)


def forward_filter(init, mats, masks):
    """Normalised forward recursion ``a_{k+1} = (a_k @ M_k) * mask_k``.

    Returns the ``(K+1, s)`` filtered vectors and the log normaliser; the log
    normaliser is ``-inf`` when the constraints cannot be met.
    """
    init = np.asarray(init, dtype=float)
    mats = np.asarray(mats, dtype=float)
    masks = np.asarray(masks, dtype=float)
    n_steps = mats.shape[0]
    out = np.empty((n_steps + 1, init.shape[0]))
    total = init.sum()
    if not total > 0.0:
        out[:] = 0.0
        return out, -math.inf
    a = init / total
    logz = math.log(total)
    out[0] = a
    for k in range(n_steps):
        a = (a @ mats[k]) * masks[k]
        total = a.sum()
        if not total > 0.0:
            out[k + 1:] = 0.0
            return out, -math.inf
        a = a / total
        logz += math.log(total)
        out[k + 1] = a
    return out, logz


def backward_sample(alphas, mats, uniforms):
    """Backward sampling pass matching :func:`forward_filter`."""
    alphas = np.asarray(alphas, dtype=float)
    mats = np.asarray(mats, dtype=float)
    n_steps = mats.shape[0]
    states = np.empty(n_steps + 1, dtype=np.int64)
    states[n_steps] = _draw(alphas[n_steps], uniforms[n_steps])
    for k in range(n_steps - 1, -1, -1):
        w = alphas[k] * mats[k][:, states[k + 1]]
        states[k] = _draw(w, uniforms[k])
    return states


def _draw(w, u):
    c = np.cumsum(w)
    total = c[-1]
    if not total > 0.0:
        raise FloatingPointError("backward sampling hit a zero-probability state")
    idx = int(np.searchsorted(c, u * total, side="right"))
    return min(idx, len(w) - 1)
