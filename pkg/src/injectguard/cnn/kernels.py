"""Kernel backend selection: compiled extension if importable, NumPy otherwise.

Set INJECTGUARD_PURE_PYTHON=1 to force the NumPy backend (used by the
benchmark and the backend-parity tests).
"""

import os

from . import kernels_numpy

if os.environ.get("INJECTGUARD_PURE_PYTHON"):
    _impl = kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = kernels_numpy
        BACKEND = "numpy"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
