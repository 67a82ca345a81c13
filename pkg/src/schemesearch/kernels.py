"""Execution kernel backend, chosen once at import.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is used.  ``SCHEMESEARCH_KERNELS=python`` forces the fallback.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("SCHEMESEARCH_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND = _active.BACKEND
im2col = _active.im2col
winograd_input = _active.winograd_input
winograd_output = _active.winograd_output
pattern_conv = _active.pattern_conv


def backends():
    """Available backend modules keyed by name (fallback always present)."""
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
