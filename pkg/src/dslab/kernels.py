"""Backend selection for the hot loops.

The compiled extension is preferred; set ``DSLAB_PURE_PYTHON=1`` to force the
pure-Python twins (useful for benchmarking and for platforms without a C
compiler).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DSLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

dual_cd = _impl.dual_cd
perceptron_epochs = _impl.perceptron_epochs
minover = _impl.minover


def backend_module(name: str):
    """Return the kernel module for ``'cython'`` or ``'python'``."""
    if name == "python":
        return _kernels_py
    from . import _kernels

    return _kernels
