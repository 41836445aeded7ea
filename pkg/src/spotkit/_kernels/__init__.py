"""Hot inner-loop kernels.

The compiled extension is used when it was built and ``SPOTKIT_PURE_PYTHON``
is unset; otherwise the numpy/pure-Python fallback is selected. Both expose
``solve_assignment``, ``contingency`` and ``majority_vote`` with identical
semantics.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("SPOTKIT_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

solve_assignment = _active.solve_assignment
contingency = _active.contingency
majority_vote = _active.majority_vote

__all__ = ["BACKEND", "compiled_backend", "python_backend",
           "solve_assignment", "contingency", "majority_vote"]
