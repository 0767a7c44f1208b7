"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``SDC_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active one.
"""
import os

from . import _pure

if os.environ.get("SDC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
        BACKEND = "python"

column_dots = _impl.column_dots
lasso_cd = _impl.lasso_cd
perplexity_search = _impl.perplexity_search


def backends():
    """Map of every importable backend name to its module."""
    found = {"python": _pure}
    try:
        from . import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found
