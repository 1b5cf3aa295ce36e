"""Backend selection for the elementwise kernels.

The compiled module is used when it imports; setting ``MSGTL_PURE_PYTHON=1``
forces the numpy fallback.  Both backends give bit-identical results.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MSGTL_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

blend = _impl.blend
gate = _impl.gate
relu_forward = _impl.relu_forward
relu_backward = _impl.relu_backward
masked_adam = _impl.masked_adam
masked_sgd = _impl.masked_sgd

__all__ = ["BACKEND", "blend", "gate", "relu_forward", "relu_backward",
           "masked_adam", "masked_sgd"]
