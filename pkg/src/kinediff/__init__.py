"""Hierarchical trajectory policies: a discrete next-pose agent on top of a
kinematics-aware trajectory diffuser, with a planar-arm testbed."""

import os

# The workload is thousands of small GEMMs; multi-threaded BLAS spends more
# time in spin-wait synchronization than in math on boxes this size.  Pin it
# to one thread unless the user overrides.
_blas_threads = int(os.environ.get("KINEDIFF_BLAS_THREADS", "1"))
try:
    from threadpoolctl import threadpool_limits

    _blas_limiter = threadpool_limits(limits=_blas_threads, user_api="blas")
except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn
    _blas_limiter = None

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
