# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im.  Same contract as ``_kernels_py``."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, :, :, :, ::1] out,
            Py_ssize_t stride):
    cdef Py_ssize_t n, c, i, j, a, b
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t KH = out.shape[2], KW = out.shape[3]
    cdef Py_ssize_t HO = out.shape[4], WO = out.shape[5]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(KH):
                    for j in range(KW):
                        for a in range(HO):
                            for b in range(WO):
                                out[n, c, i, j, a, b] = x[n, c, i + a * stride, j + b * stride]


def _col2im(real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out,
            Py_ssize_t stride):
    cdef Py_ssize_t n, c, i, j, a, b
    cdef Py_ssize_t N = cols.shape[0], C = cols.shape[1]
    cdef Py_ssize_t KH = cols.shape[2], KW = cols.shape[3]
    cdef Py_ssize_t HO = cols.shape[4], WO = cols.shape[5]
    # fixed loop order keeps the float summation order reproducible
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(KH):
                    for j in range(KW):
                        for a in range(HO):
                            for b in range(WO):
                                out[n, c, i + a * stride, j + b * stride] += cols[n, c, i, j, a, b]


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    _im2col(x, out, stride)
    return out


def col2im(cols, Py_ssize_t h, Py_ssize_t w, Py_ssize_t stride):
    cols = np.ascontiguousarray(cols)
    n, c = cols.shape[0], cols.shape[1]
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, stride)
    return out


def _dw_forward(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] out,
                Py_ssize_t stride):
    cdef Py_ssize_t nc, i, j, a, b
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t HO = out.shape[2], WO = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t KH = w.shape[1], KW = w.shape[2]
    cdef real wv
    cdef real *xp
    cdef real *op
    cdef real *xrow
    cdef real *orow
    with nogil:
        for nc in range(N * C):
            xp = &x[0, 0, 0, 0] + nc * H * W
            op = &out[0, 0, 0, 0] + nc * HO * WO
            for i in range(KH):
                for j in range(KW):
                    wv = w[nc % C, i, j]
                    for a in range(HO):
                        xrow = xp + (i + a * stride) * W + j
                        orow = op + a * WO
                        if stride == 1:
                            for b in range(WO):
                                orow[b] += wv * xrow[b]
                        else:
                            for b in range(WO):
                                orow[b] += wv * xrow[b * stride]


def _dw_backward(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] g,
                 real[:, :, :, ::1] gx, real[:, :, ::1] gw, Py_ssize_t stride):
    cdef Py_ssize_t n, c, i, j, a, b
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t HO = g.shape[2], WO = g.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t KH = w.shape[1], KW = w.shape[2]
    cdef real wv
    cdef double acc0, acc1, acc2, acc3
    cdef real *xrow
    cdef real *gxrow
    cdef real *grow
    with nogil:
        for c in range(C):
            for i in range(KH):
                for j in range(KW):
                    wv = w[c, i, j]
                    acc0 = 0
                    acc1 = 0
                    acc2 = 0
                    acc3 = 0
                    for n in range(N):
                        for a in range(HO):
                            xrow = &x[n, c, 0, 0] + (i + a * stride) * W + j
                            gxrow = &gx[n, c, 0, 0] + (i + a * stride) * W + j
                            grow = &g[n, c, a, 0]
                            # four independent partial sums break the add latency chain
                            b = 0
                            while b + 4 <= WO:
                                acc0 = acc0 + <double>grow[b] * xrow[b * stride]
                                acc1 = acc1 + <double>grow[b + 1] * xrow[(b + 1) * stride]
                                acc2 = acc2 + <double>grow[b + 2] * xrow[(b + 2) * stride]
                                acc3 = acc3 + <double>grow[b + 3] * xrow[(b + 3) * stride]
                                b += 4
                            while b < WO:
                                acc0 = acc0 + <double>grow[b] * xrow[b * stride]
                                b += 1
                            if stride == 1:
                                for b in range(WO):
                                    gxrow[b] += wv * grow[b]
                            else:
                                for b in range(WO):
                                    gxrow[b * stride] += wv * grow[b]
                    gw[c, i, j] = <real>((acc0 + acc1) + (acc2 + acc3))


def depthwise_forward(x, w, Py_ssize_t stride):
    """``x[N,C,H,W]`` (padded), ``w[C,kh,kw]`` -> ``out[N,C,Ho,Wo]``."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    n, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n, c, (h - kh) // stride + 1, (wd - kw) // stride + 1), dtype=x.dtype)
    _dw_forward(x, w, out, stride)
    return out


def depthwise_backward(x, w, g, Py_ssize_t stride):
    """Gradients ``(d x_padded, d w)`` of :func:`depthwise_forward`."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    _dw_backward(x, w, g, gx, gw, stride)
    return gx, gw
