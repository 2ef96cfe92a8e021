"""Backend selection for the numerical kernels.

The compiled extension is used when it imports cleanly; setting the
environment variable ``MSURV_PURE_PYTHON`` to a non-empty value forces the
pure-Python implementations.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("MSURV_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels

digamma = _impl.digamma
digamma_diff = _impl.digamma_diff
digamma_array = _impl.digamma_array
dislocation_series = _impl.dislocation_series
log_dislocation_quad = _impl.log_dislocation_quad
log_dislocation_integral = _impl.log_dislocation_integral
forward_filter = _impl.forward_filter
backward_sample = _impl.backward_sample

MAX_SERIES_TERMS = _pykernels.MAX_SERIES_TERMS
SERIES_RTOL = _pykernels.SERIES_RTOL

__all__ = [
    "BACKEND",
    "digamma",
    "digamma_diff",
    "digamma_array",
    "dislocation_series",
    "log_dislocation_quad",
    "log_dislocation_integral",
    "forward_filter",
    "backward_sample",
]
