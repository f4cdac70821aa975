"""Risk monitoring for sliding-window visual odometry.

Propagates per-feature uncertainty out of the bundle-adjustment normal
matrix via exact per-landmark marginalization, fuses it with residuals
and geometric conditioning into a real-time scalar risk, and evaluates
its predictive power under controlled feature-level corruption.
"""
import os

# every dense operation here is small (<= 48-dim blocks); threaded BLAS
# only adds spin-wait contention at this scale
_blas_threads = int(os.environ.get("VORISK_BLAS_THREADS", "1"))
if _blas_threads > 0:
    try:
        from threadpoolctl import threadpool_limits
        _blas_limit = threadpool_limits(_blas_threads, user_api="blas")
    except ImportError:
        pass

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: E402

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
