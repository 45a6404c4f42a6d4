"""Pure-numpy im2col / col2im, used when the compiled kernels are absent."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride):
    """``x[N,C,H,W]`` (already padded) -> ``cols[N,C,kh,kw,Ho,Wo]``."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(x, (n, c, kh, kw, ho, wo),
                      (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return np.ascontiguousarray(view)


def col2im(cols, h, w, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back onto ``[N,C,h,w]``."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            out[:, :, i:hi:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def depthwise_forward(x, w, stride):
    """``x[N,C,H,W]`` (padded), ``w[C,kh,kw]`` -> ``out[N,C,Ho,Wo]``."""
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += win * w[None, :, i, j, None, None]
    return out


def depthwise_backward(x, w, g, stride):
    """Gradients ``(d x_padded, d w)`` of :func:`depthwise_forward`."""
    _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                  slice(j, j + stride * wo, stride))
            gw[:, i, j] = (g * x[sl]).sum(axis=(0, 2, 3))
            gx[sl] += g * w[None, :, i, j, None, None]
    return gx, gw
