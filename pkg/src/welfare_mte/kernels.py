"""Kernel selection: compiled extension when available, numpy otherwise.

Set ``WELFARE_MTE_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _kernels_python

if os.environ.get("WELFARE_MTE_PURE_PYTHON"):
    from ._kernels_python import probit_terms, solve_regimes

    BACKEND = "python"
else:
    try:
        from ._kernels import probit_terms, solve_regimes

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        from ._kernels_python import probit_terms, solve_regimes

        BACKEND = "python"

python_kernels = _kernels_python

__all__ = ["BACKEND", "probit_terms", "python_kernels", "solve_regimes"]
