"""Network primitives built on the autodiff engine."""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .engine import (ConfigurationError, DimensionError, Tensor, _make,
                     _wrap, add, concat, log_softmax, matmul, reshape,
                     softmax, transpose)

PADDING_MODES = ("zero", "circular", "valid")


def pad2d(x: Tensor, p: int, mode: str = "zero") -> Tensor:
    """Pad the two trailing axes by ``p`` on every side."""
    if p == 0 or mode == "valid":
        return x
    if mode not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {mode!r}")
    h, w = x.shape[-2:]
    if mode == "zero":
        out = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])

        def bw(g):
            x._accumulate(g[..., p:p + h, p:p + w])
    else:
        if p > h or p > w:
            raise DimensionError(f"circular pad {p} exceeds spatial size {(h, w)}")
        out = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)],
                     mode="wrap")

        def bw(g):
            # fold the wrapped border back onto the interior
            g = g.copy()
            g[..., p:2 * p, :] += g[..., p + h:, :]
            g[..., h:h + p, :] += g[..., :p, :]
            g[..., :, p:2 * p] += g[..., :, p + w:]
            g[..., :, w:w + p] += g[..., :, :p]
            x._accumulate(g[..., p:p + h, p:p + w])

    return _make(out, (x,), f"pad_{mode}", bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | tuple = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x[N,C,H,W]`` with ``weight[K,C/groups,kh,kw]``.

    ``padding`` is an int (zero padding), ``"valid"``, or a tuple
    ``(mode, p)`` with mode in ``{"zero", "circular"}``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or k % groups:
        raise ConfigurationError(
            f"groups={groups} must divide input channels {c} and output channels {k}")
    if cg != c // groups:
        raise DimensionError(
            f"conv2d channel axis: weight has {cg} per group, input gives {c // groups}")
    if stride < 1:
        raise ConfigurationError("stride must be positive")
    mode, p = _parse_padding(padding)
    xp = pad2d(x, p, mode)
    hp, wp = xp.shape[-2:]
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    L = ho * wo
    kg = k // groups
    ck = cg * kh * kw
    if cg == 1 and kg == 1 and groups > 1:
        path = "depthwise"  # direct kernel, no im2col
        w2 = weight.data[:, 0]
        out = kernels.depthwise_forward(xp.data, w2, stride)
    else:
        path = "gemm"
        if kh == kw == 1 and stride == 1:
            cols = xp.data
        else:
            cols = kernels.im2col(xp.data, kh, kw, stride)  # N,C,kh,kw,Ho,Wo
        cols2 = cols.reshape(n, groups, ck, L)
        w2 = weight.data.reshape(groups, kg, ck)
        out = np.matmul(w2[0], cols2[:, 0]) if groups == 1 else np.matmul(w2[None], cols2)
    out = out.reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    def bw(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if path == "depthwise":
            gxp, gw = kernels.depthwise_backward(xp.data, w2, g, stride)
            if weight.requires_grad:
                weight._accumulate(gw.reshape(weight.shape))
            if xp.requires_grad:
                xp._accumulate(gxp)
            return
        g2 = g.reshape(n, groups, kg, L)
        if weight.requires_grad:
            gw = np.matmul(g2, np.swapaxes(cols2, -1, -2)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if xp.requires_grad:
            gcols = np.matmul(np.swapaxes(w2, -1, -2)[None], g2)
            if kh == kw == 1 and stride == 1:
                xp._accumulate(gcols.reshape(xp.shape))
            else:
                gcols = np.ascontiguousarray(gcols.reshape(n, c, kh, kw, ho, wo))
                xp._accumulate(kernels.col2im(gcols, hp, wp, stride))

    parents = (xp, weight) + ((bias,) if bias is not None else ())
    return _make(out.astype(x.dtype, copy=False), parents, "conv2d", bw)


def _parse_padding(padding):
    if padding == "valid":
        return "valid", 0
    if isinstance(padding, (int, np.integer)):
        return "zero", int(padding)
    mode, p = padding
    if mode not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {mode!r}")
    return mode, int(p)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is ``[D_out, D_in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input last axis {x.shape[-1]} != weight D_in {weight.shape[1]}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(rstd * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), "layer_norm", bw)


ATTENTION_KEYS = ("q_w", "q_b", "k_w", "v_w", "v_b", "o_w", "o_b")


def multi_head_self_attention(tokens: Tensor, params: dict, heads: int) -> Tensor:
    """Scaled dot-product self-attention over ``tokens[N,T,D]``.

    ``params`` maps ``q_w, q_b, k_w, v_w, v_b, o_w, o_b`` to tensors
    (weights ``[D,D]`` in ``[out, in]`` layout).  There is no key bias: it
    shifts every score in a row equally, so softmax erases it and its
    gradient is identically zero.
    """
    n, t, d = tokens.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"width {d} not divisible by heads={heads}")
    dh = d // heads

    def split(z):  # N,T,D -> N,H,T,dh
        return transpose(reshape(z, (n, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(tokens, params["q_w"], params["q_b"]))
    k = split(linear(tokens, params["k_w"]))
    v = split(linear(tokens, params["v_w"], params["v_b"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    return linear(ctx, params["o_w"], params["o_b"])


def cross_entropy(logits: Tensor, targets, epsilon: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed one-hot targets.

    The true class keeps ``1 - epsilon``; the remaining mass is spread
    evenly over the other ``K - 1`` classes.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if not 0.0 <= epsilon < 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1), got {epsilon}")
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} != ({n},)")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index out of range [0, {k})")
    dist = np.zeros((n, k), dtype=logits.dtype)
    if epsilon:
        dist[:] = epsilon / (k - 1)
    dist[np.arange(n), targets] = 1.0 - epsilon
    logp = log_softmax(logits, axis=-1)
    return (logp * _wrap(dist)).sum() * (-1.0 / n)


cross_entropy_label_smoothing = cross_entropy


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]``."""
    return x.mean(axis=(2, 3))


def relu6(x: Tensor) -> Tensor:
    keep = (x.data > 0) & (x.data < 6)
    return _make(np.clip(x.data, 0, 6), (x,), "relu6",
                 lambda g: x._accumulate(g * keep))


def cat_features(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)
