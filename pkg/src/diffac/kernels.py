"""Backend selection for the MLP kernels.

The compiled extension is used when it imports; otherwise the numpy
reference is used. ``DIFFAC_BACKEND=python`` forces the fallback.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_forced = os.environ.get("DIFFAC_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_c as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        if _forced == "compiled":
            raise
        log.debug("compiled kernels unavailable; using numpy fallback")
        _impl = _kernels_py
        BACKEND = "python"

RELU = _kernels_py.RELU
TANH = _kernels_py.TANH

mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward

__all__ = ["BACKEND", "RELU", "TANH", "mlp_forward", "mlp_backward"]
