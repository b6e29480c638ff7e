"""Kernel selection: the compiled ``_kernels`` extension when it is built,
otherwise the pure-Python ``_kernels_py``.

Set ``MHE_FUSION_PURE_PYTHON=1`` to force the fallback.
"""
import os

from ._kernels_py import NotPositiveDefiniteError

if os.environ.get("MHE_FUSION_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

BACKEND = "compiled" if _impl.__name__.endswith("._kernels") else "python"

cholesky = _impl.cholesky
cholesky_solve = _impl.cholesky_solve
constvel_chain = _impl.constvel_chain
diffdrive_chain = _impl.diffdrive_chain

__all__ = ["BACKEND", "NotPositiveDefiniteError", "cholesky", "cholesky_solve",
           "constvel_chain", "diffdrive_chain"]
