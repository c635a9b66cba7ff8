"""Kernel backend selection.

Prefers the compiled extension (``moleseg._native``) when importable, and
falls back to the NumPy implementations otherwise. ``MMSEG_KERNELS`` forces
a backend: ``python`` (NumPy) or ``native`` (error if unavailable).
"""

import os

import numpy as np

from . import _numpy

try:
    from moleseg import _native
except ImportError:
    _native = None

_forced = os.environ.get("MMSEG_KERNELS", "").strip().lower()
if _forced == "python":
    _impl = _numpy
elif _forced == "native":
    if _native is None:
        raise ImportError("MMSEG_KERNELS=native but moleseg._native is not built")
    _impl = _native
else:
    _impl = _native if _native is not None else _numpy

BACKEND = "native" if _impl is _native else "python"


def backend_name() -> str:
    return BACKEND


def _contiguous(x):
    return np.ascontiguousarray(x)


def upsample_bilinear_fwd(x, out_h, out_w):
    return _impl.upsample_bilinear_fwd(_contiguous(x), out_h, out_w)


def upsample_bilinear_bwd(grad, in_h, in_w):
    return _impl.upsample_bilinear_bwd(_contiguous(grad), in_h, in_w)
