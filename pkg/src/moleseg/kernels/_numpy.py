"""Pure-NumPy kernel implementations (fallback backend).

Each function mirrors the signature and arithmetic order of its compiled
counterpart in ``moleseg._native`` so the two backends agree to float
rounding.
"""

import numpy as np


def _bilinear_axis(in_size: int, out_size: int):
    """Half-pixel-center source coordinates for one axis.

    Returns (lo, hi, frac): integer neighbours and the interpolation
    fraction toward ``hi``.
    """
    scale = in_size / out_size
    # align_corners=False: sample at pixel centers of the output grid
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(np.float64)
    return lo, hi, frac


def upsample_bilinear_fwd(x, out_h: int, out_w: int):
    """Bilinear resample of x[C,H,W] to [C,out_h,out_w]."""
    c, h, w = x.shape
    y_lo, y_hi, fy = _bilinear_axis(h, out_h)
    x_lo, x_hi, fx = _bilinear_axis(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = x[:, y_lo][:, :, x_lo] * (1.0 - fx) + x[:, y_lo][:, :, x_hi] * fx
    bot = x[:, y_hi][:, :, x_lo] * (1.0 - fx) + x[:, y_hi][:, :, x_hi] * fx
    out = top * (1.0 - fy) + bot * fy
    return out.astype(x.dtype, copy=False)


def upsample_bilinear_bwd(grad, in_h: int, in_w: int):
    """Scatter grad[C,out_h,out_w] back to the [C,in_h,in_w] source grid."""
    c, out_h, out_w = grad.shape
    y_lo, y_hi, fy = _bilinear_axis(in_h, out_h)
    x_lo, x_hi, fx = _bilinear_axis(in_w, out_w)
    wy = np.stack([1.0 - fy, fy])        # [2, out_h]
    wx = np.stack([1.0 - fx, fx])        # [2, out_w]
    ys = np.stack([y_lo, y_hi])
    xs = np.stack([x_lo, x_hi])
    gx = np.zeros((c, in_h, in_w), dtype=grad.dtype)
    flat = gx.reshape(c, -1)
    g64 = grad.astype(np.float64, copy=False)
    for a in range(2):
        for b in range(2):
            contrib = g64 * wy[a][None, :, None] * wx[b][None, None, :]
            idx = (ys[a][:, None] * in_w + xs[b][None, :]).ravel()
            # bincount per channel: fast replacement for np.add.at
            for ch in range(c):
                flat[ch] += np.bincount(
                    idx, weights=contrib[ch].ravel(), minlength=in_h * in_w
                ).astype(grad.dtype, copy=False)
    return gx
