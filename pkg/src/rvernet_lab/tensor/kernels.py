"""Hot convolution kernels: compiled extension when built, numpy otherwise.

Set ``RVERNET_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("RVERNET_KERNELS", "auto") != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "compiled"

if BACKEND == "compiled":
    _impl = _compiled
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward

__all__ = ["BACKEND", "im2col", "col2im", "depthwise_forward", "depthwise_backward"]
