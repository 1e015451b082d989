"""Kernel selection.

The compiled extension is used when importable; set ``CRSURV_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("CRSURV_PURE_PYTHON") != "1":
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

kernels = compiled if compiled is not None else python
NAME = "compiled" if compiled is not None else "python"


def get(name=None):
    """Return a kernel module by name (``"compiled"``, ``"python"`` or the active one)."""
    if name is None:
        return kernels
    if name == "python":
        return python
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not available")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
