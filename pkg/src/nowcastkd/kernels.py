"""Backend selection for the hot numeric kernels.

The compiled extension is used when it was built; otherwise, or when
``NOWCASTKD_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NOWCASTKD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

contingency_by_lead = _impl.contingency_by_lead
weighted_sq_error = _impl.weighted_sq_error

__all__ = ["BACKEND", "contingency_by_lead", "weighted_sq_error"]
