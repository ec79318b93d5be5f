"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``FEDSAR_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from fedsar import _fallback

BACKEND = "python"
if os.environ.get("FEDSAR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fedsar import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

haar_fwd_level = _impl.haar_fwd_level
haar_inv_level = _impl.haar_inv_level
im2col = _impl.im2col
col2im = _impl.col2im
conv_direct_forward = _impl.conv_direct_forward
conv_direct_backward = _impl.conv_direct_backward
channel_max = _impl.channel_max
scatter_channel_add = _impl.scatter_channel_add
gate_forward = _impl.gate_forward
gate_backward = _impl.gate_backward

__all__ = [
    "BACKEND", "haar_fwd_level", "haar_inv_level", "im2col", "col2im",
    "conv_direct_forward", "conv_direct_backward", "channel_max", "scatter_channel_add",
    "gate_forward", "gate_backward",
]
