"""Pick the kernel implementation once, at import.

``CASCADE_DISTILL_BACKEND`` may be ``auto`` (default), ``compiled`` or
``python``. ``auto`` uses the Cython extension when it imported cleanly.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _select(choice):
    if choice == "python":
        return _kernels_py, "python"
    if choice == "compiled":
        if _kernels_c is None:
            raise ImportError(
                "CASCADE_DISTILL_BACKEND=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        return _kernels_c, "compiled"
    if choice == "auto":
        if _kernels_c is not None:
            return _kernels_c, "compiled"
        return _kernels_py, "python"
    raise ImportError(f"unknown CASCADE_DISTILL_BACKEND {choice!r}")


kernels, BACKEND = _select(os.environ.get("CASCADE_DISTILL_BACKEND", "auto"))
HAVE_COMPILED = _kernels_c is not None


def get(name):
    """Return the kernel module called ``name`` ("python" or "compiled")."""
    return _select(name)[0]
