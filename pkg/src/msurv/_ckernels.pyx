# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels (see ``_pykernels`` for the reference versions)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, exp, expm1, sqrt, lgamma, INFINITY

cnp.import_array()

cdef double C0 = 1.0 / 12.0
cdef double C1 = 1.0 / 120.0
cdef double C2 = 1.0 / 252.0
cdef double C3 = 1.0 / 240.0
cdef double C4 = 1.0 / 132.0
cdef double C5 = 691.0 / 32760.0
cdef double C6 = 1.0 / 12.0
cdef double EPS = 2.220446049250313e-16
cdef int MAX_SERIES_TERMS = 512
cdef double SERIES_RTOL = 1e-11
cdef int MAX_SOURCES = 64


cdef inline double _tail(double x) nogil:
    cdef double r2 = 1.0 / (x * x)
    return r2 * (C0 - r2 * (C1 - r2 * (C2 - r2 * (C3 - r2 * (C4 - r2 * (C5 - r2 * C6))))))


cdef inline double _digamma(double x) nogil:
    cdef double acc = 0.0
    while x < 8.0:
        acc -= 1.0 / x
        x += 1.0
    return acc + log(x) - 0.5 / x - _tail(x)


cdef inline double _digamma_diff(double x, double h) nogil:
    cdef double acc = 0.0
    cdef double y
    while x < 8.0:
        acc += h / (x * (x + h))
        x += 1.0
    y = x + h
    return acc + log1p(h / x) + 0.5 * h / (x * y) - (_tail(y) - _tail(x))


def digamma(double x):
    """Digamma function for positive real ``x``."""
    if not x > 0.0:
        raise ValueError(f"digamma requires x > 0, got {x!r}")
    return _digamma(x)


def digamma_diff(double x, double h):
    """``digamma(x + h) - digamma(x)`` without subtractive cancellation (h >= 0)."""
    if not x > 0.0:
        raise ValueError(f"digamma requires x > 0, got {x!r}")
    return _digamma_diff(x, h)


def digamma_array(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef Py_ssize_t i, n = flat.shape[0]
    for i in range(n):
        if not flat[i] > 0.0:
            raise ValueError("digamma requires x > 0")
        out[i] = _digamma(flat[i])
    return out.reshape(np.shape(x))


cdef int _prepare(object r, object d, object g, long* rr, long* dd, double* gg) except -1:
    cdef Py_ssize_t n = len(r), i
    cdef long total = 0
    if len(d) != n or len(g) != n:
        raise ValueError("r, d and gamma must have equal length")
    if n > MAX_SOURCES:
        raise ValueError("too many source states")
    for i in range(n):
        rr[i] = r[i]
        dd[i] = d[i]
        gg[i] = g[i]
        if rr[i] < 0 or dd[i] < 0:
            raise ValueError("counts must be non-negative")
        total += dd[i]
    if total < 1:
        raise ValueError("at least one unit must move (D >= 1)")
    return n


cdef double _binom(long n, long k) nogil:
    cdef double out = 1.0
    cdef long i
    if k > n - k:
        k = n - k
    for i in range(k):
        out = out * (n - i) / (i + 1)
    return out


cdef void _series(int n, long* r, long* d, double* g, double rho, double* value, double* err) nogil:
    cdef double base = rho, total = 0.0, absum = 0.0, coef, shift, term
    cdef long k[64]
    cdef int i, pos, parity
    for i in range(n):
        base += g[i] * r[i]
        k[i] = 0
    while True:
        pos = 0
        while pos < n:
            if k[pos] < d[pos]:
                k[pos] += 1
                break
            k[pos] = 0
            pos += 1
        if pos == n:
            break
        coef = 1.0
        shift = 0.0
        parity = 0
        for i in range(n):
            if k[i]:
                coef *= _binom(d[i], k[i])
                shift += g[i] * k[i]
                parity += k[i]
        term = coef * _digamma_diff(base, shift)
        if parity % 2:
            total += term
        else:
            total -= term
        absum += term
    value[0] = total
    err[0] = 8.0 * EPS * absum


def dislocation_series(r, d, g, double rho):
    """Alternating digamma sum; returns ``(value, abs_error_estimate)``."""
    cdef long rr[64]
    cdef long dd[64]
    cdef double gg[64]
    cdef double value, err
    cdef int n = _prepare(r, d, g, rr, dd, gg)
    _series(n, rr, dd, gg, rho, &value, &err)
    return value, err


cdef inline double _log1mexp(double x) nogil:
    if x < 0.6931471805599453:
        return log(-expm1(-x))
    return log1p(-exp(-x))


cdef double _logf(double v, double a, int n, long* d, double* g) nogil:
    cdef double u = exp(v)
    cdef double out = v - a * u - _log1mexp(u)
    cdef int i
    for i in range(n):
        if d[i]:
            out += d[i] * _log1mexp(g[i] * u)
    return out


cdef double _dlogf(double v, double a, int n, long* d, double* g) nogil:
    cdef double u = exp(v), z
    cdef double out = 1.0 - a * u
    cdef int i
    out -= u / expm1(u) if u > 1e-300 else 1.0
    for i in range(n):
        if d[i]:
            z = g[i] * u
            out += d[i] * (z / expm1(z) if z > 1e-300 else 1.0)
    return out


cdef double _quad(int n, long* r, long* d, double* g, double rho) nogil:
    cdef double a = rho, lo = -60.0, hi = 0.0, mid, vstar, curv, sigma, h, fmax, total, val, direction
    cdef double delta = 1e-4
    cdef int i, it, side
    cdef long step
    for i in range(n):
        a += g[i] * r[i]
    while _dlogf(hi, a, n, d, g) > 0.0:
        hi += 2.0
    for it in range(200):
        mid = 0.5 * (lo + hi)
        if _dlogf(mid, a, n, d, g) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    vstar = 0.5 * (lo + hi)
    curv = -(_dlogf(vstar + delta, a, n, d, g) - _dlogf(vstar - delta, a, n, d, g)) / (2 * delta)
    sigma = 1.0 / sqrt(curv) if curv > 0 else 1.0
    h = 0.125 if sigma / 4.0 > 0.125 else sigma / 4.0
    fmax = _logf(vstar, a, n, d, g)
    total = 1.0
    for side in range(2):
        direction = -1.0 if side == 0 else 1.0
        step = 1
        while step < 100000:
            val = _logf(vstar + direction * step * h, a, n, d, g) - fmax
            total += exp(val)
            if val < -40.0:
                break
            step += 1
    return fmax + log(total * h)


def log_dislocation_quad(r, d, g, double rho):
    """Log of the dislocation integral by trapezoidal quadrature in ``log(-log p)``."""
    cdef long rr[64]
    cdef long dd[64]
    cdef double gg[64]
    cdef int n = _prepare(r, d, g, rr, dd, gg)
    return _quad(n, rr, dd, gg, rho)


cdef double _log_integral(int n, long* r, long* d, double* g, double rho) nogil:
    cdef double a = rho, value, err
    cdef long big_d = 0
    cdef long nterms = 1
    cdef int i
    cdef bint unit = True
    for i in range(n):
        a += g[i] * r[i]
        big_d += d[i]
        if d[i] and g[i] != 1.0:
            unit = False
    if unit:
        return lgamma(a) + lgamma(<double>big_d) - lgamma(a + big_d)
    for i in range(n):
        nterms *= d[i] + 1
        if nterms > MAX_SERIES_TERMS:
            break
    if nterms <= MAX_SERIES_TERMS:
        _series(n, r, d, g, rho, &value, &err)
        if value > 0.0 and err <= SERIES_RTOL * value:
            return log(value)
    return _quad(n, r, d, g, rho)


def log_dislocation_integral(r, d, g, double rho):
    """Log of the dislocation integral, choosing the most accurate route."""
    cdef long rr[64]
    cdef long dd[64]
    cdef double gg[64]
    cdef int n = _prepare(r, d, g, rr, dd, gg)
    return _log_integral(n, rr, dd, gg, rho)


def forward_filter(init, mats, masks):
    """Normalised forward recursion ``a_{k+1} = (a_k @ M_k) * mask_k``."""
    cdef double[:] a0 = np.ascontiguousarray(init, dtype=np.float64)
    cdef double[:, :, :] m = np.ascontiguousarray(mats, dtype=np.float64)
    cdef double[:, :] mk = np.ascontiguousarray(masks, dtype=np.float64)
    cdef Py_ssize_t n_steps = m.shape[0], s = a0.shape[0], k, i, j
    out_arr = np.zeros((n_steps + 1, s))
    cdef double[:, :] out = out_arr
    cdef double total = 0.0, logz, acc
    for i in range(s):
        total += a0[i]
    if not total > 0.0:
        return out_arr, -INFINITY
    logz = log(total)
    for i in range(s):
        out[0, i] = a0[i] / total
    for k in range(n_steps):
        total = 0.0
        for j in range(s):
            acc = 0.0
            if mk[k, j] != 0.0:
                for i in range(s):
                    acc += out[k, i] * m[k, i, j]
                acc *= mk[k, j]
            out[k + 1, j] = acc
            total += acc
        if not total > 0.0:
            for j in range(k + 1, n_steps + 1):
                for i in range(s):
                    out[j, i] = 0.0
            return out_arr, -INFINITY
        logz += log(total)
        for j in range(s):
            out[k + 1, j] /= total
    return out_arr, logz


def backward_sample(alphas, mats, uniforms):
    """Backward sampling pass matching :func:`forward_filter`."""
    cdef double[:, :] al = np.ascontiguousarray(alphas, dtype=np.float64)
    cdef double[:, :, :] m = np.ascontiguousarray(mats, dtype=np.float64)
    cdef double[:] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n_steps = m.shape[0], s = al.shape[1], k, i
    states_arr = np.empty(n_steps + 1, dtype=np.int64)
    cdef cnp.int64_t[:] states = states_arr
    cdef double[:] w = np.empty(s)
    for i in range(s):
        w[i] = al[n_steps, i]
    states[n_steps] = _draw(w, u[n_steps])
    for k in range(n_steps - 1, -1, -1):
        for i in range(s):
            w[i] = al[k, i] * m[k, i, states[k + 1]]
        states[k] = _draw(w, u[k])
    return states_arr


cdef Py_ssize_t _draw(double[:] w, double u) except -1:
    cdef Py_ssize_t i, s = w.shape[0]
    cdef double total = 0.0, target, acc = 0.0
    for i in range(s):
        total += w[i]
    if not total > 0.0:
        raise FloatingPointError("backward sampling hit a zero-probability state")
    target = u * total
    for i in range(s):
        acc += w[i]
        if acc > target and w[i] > 0.0:
            return i
    for i in range(s - 1, -1, -1):
        if w[i] > 0.0:
            return i
    return s - 1
