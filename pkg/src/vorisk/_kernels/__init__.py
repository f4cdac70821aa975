"""Kernel backend selection.

The compiled extension is preferred when importable; set VORISK_KERNELS to
"python" to force the numpy fallback or "compiled" to require the
extension. Within a process the selection is fixed at import so that
simulate and replay paths use identical arithmetic.
"""
import os

from . import _pykern

_choice = os.environ.get("VORISK_KERNELS", "auto")

if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"VORISK_KERNELS must be auto|compiled|python, "
                     f"got {_choice!r}")

_impl = _pykern
BACKEND = "python"

if _choice in ("auto", "compiled"):
    try:
        from . import _fastkern as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = _pykern

sym_eigvals3 = _impl.sym_eigvals3
sym_inv3 = _impl.sym_inv3
singular_values_2x3 = _impl.singular_values_2x3
pixel_covariance = _impl.pixel_covariance
row_gram3 = _impl.row_gram3
sym_gram_scaled = _impl.sym_gram_scaled
marginal_from_gram = _impl.marginal_from_gram
frame_stats = _impl.frame_stats
# large-GEMM reduction; the BLAS-backed numpy form beats a C loop here
weighted_outer_sum = _pykern.weighted_outer_sum


def implementations():
    """Available kernel modules keyed by backend name (for benchmarks)."""
    impls = {"python": _pykern}
    try:
        from . import _fastkern
        impls["compiled"] = _fastkern
    except ImportError:
        pass
    return impls
