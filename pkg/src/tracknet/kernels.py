"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set ``TRACKNET_PURE_PYTHON=1`` before import to force the numpy fallback.
"""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("TRACKNET_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _fallback
    else:
        BACKEND = "compiled"
else:
    _impl = _fallback

tube_nms = _impl.tube_nms
roi_pool_forward = _impl.roi_pool_forward
roi_pool_backward = _impl.roi_pool_backward
block_match = _impl.block_match

__all__ = ["BACKEND", "tube_nms", "roi_pool_forward", "roi_pool_backward", "block_match"]
