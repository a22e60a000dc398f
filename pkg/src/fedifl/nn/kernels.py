"""Kernel backend selection.

The compiled Cython backend is used when it was built; otherwise the numpy
implementation is used. Set ``FEDIFL_KERNELS=python`` to force the fallback.
"""

import os

from fedifl.nn import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FEDIFL_KERNELS", "").lower() != "python":
    try:
        from fedifl.nn import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
maxpool1d_forward = _impl.maxpool1d_forward
maxpool1d_backward = _impl.maxpool1d_backward

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
]
