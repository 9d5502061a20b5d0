"""Convolution and sampling operators built on :mod:`burstforge.tensor`.

Images are ``[C, H, W]`` or batched ``[N, C, H, W]``; all padding is zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, make_op

# Deformable offsets use 2K channels with (dy, dx) interleaved per tap.
# Flipping this to "swapped" reads (dx, dy) instead; selftest uses it as a
# negative control.
OFFSET_LAYOUT = "interleaved"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(y, y.shape[1:]) if squeeze else y


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> strided view [N,C,ho,wo,k,k]."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, s: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: cols [N,C,ho,wo,k,k] summed into padded image."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += cols[..., i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{wd} too small for kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, s, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [N,ho,wo,Cout]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple, s: int, p: int) -> np.ndarray:
    k = w.shape[-1]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # [N,ho,wo,C,k,k]
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    h, wd = in_hw
    padded = (g.shape[0], w.shape[1], h + 2 * p, wd + 2 * p)
    dxp = _col2im(dcols, padded, k, s)
    return dxp[:, :, p : p + h, p : p + wd] if p else dxp


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, s, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # [Cout,C,k,k]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding (``padding`` defaults to (k-1)/2)."""
    x4, squeeze = _batched(x)
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    c = x4.shape[1]
    if c % groups or cout % groups or c // groups != cin_g:
        raise ValueError(f"channel/group mismatch: input has {c} channels, weight {weight.shape}, groups={groups}")
    p = (k - 1) // 2 if padding is None else padding
    s = stride
    xd, wd = x4.data, weight.data
    in_hw = xd.shape[2:]
    og = cout // groups

    if groups == 1:
        out = _conv_forward(xd, wd, s, p)
    else:
        out = np.concatenate([
            _conv_forward(xd[:, gi * cin_g:(gi + 1) * cin_g], wd[gi * og:(gi + 1) * og], s, p)
            for gi in range(groups)], axis=1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        if groups == 1:
            gx = _conv_input_grad(g, wd, in_hw, s, p) if x4.requires_grad else None
            gw = _conv_weight_grad(xd, g, k, s, p) if weight.requires_grad else None
        else:
            gx_parts, gw_parts = [], []
            for gi in range(groups):
                gs = g[:, gi * og:(gi + 1) * og]
                xs = xd[:, gi * cin_g:(gi + 1) * cin_g]
                ws = wd[gi * og:(gi + 1) * og]
                gx_parts.append(_conv_input_grad(gs, ws, in_hw, s, p))
                gw_parts.append(_conv_weight_grad(xs, gs, k, s, p))
            gx = np.concatenate(gx_parts, axis=1)
            gw = np.concatenate(gw_parts, axis=0)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    return _unbatch(make_op(out, inputs, backward, "conv2d"), squeeze)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution producing exactly ``stride`` x the input size.

    ``weight`` is ``[Cin, Cout, k, k]``. The result is the adjoint of
    :func:`conv2d` with the same weight, stride and padding, applied from
    ``[Cout, sH, sW]`` to ``[Cin, H, W]``.
    """
    x4, squeeze = _batched(x)
    cin, cout, k, _ = weight.shape
    if x4.shape[1] != cin:
        raise ValueError(f"input has {x4.shape[1]} channels, weight expects {cin}")
    s, p = stride, padding
    h, w = x4.shape[2], x4.shape[3]
    out_hw = (h * s, w * s)
    if (out_hw[0] + 2 * p - k) // s + 1 != h or (out_hw[1] + 2 * p - k) // s + 1 != w:
        raise ValueError(f"kernel {k}, stride {s}, padding {p} cannot map {h}x{w} to {out_hw}")
    xd, wd = x4.data, weight.data
    out = _conv_input_grad(xd, wd, out_hw, s, p)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_forward(g, wd, s, p) if x4.requires_grad else None
        gw = _conv_weight_grad(g, xd, k, s, p) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x4, weight) if bias is None else (x4, weight, bias)
    return _unbatch(make_op(out, inputs, backward, "transposed_conv2d"), squeeze)


# ------------------------------------------------------------- sampling

def _bilinear_terms(ys: np.ndarray, xs: np.ndarray, h: int, w: int):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        flat = np.where(valid, np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1), 0)
        corners.append((flat, valid))
    return corners, wy, wx


def gather_bilinear(feature: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample ``feature [N,C,H,W]`` at fractional points ``ys, xs [N,Q]``.

    Returns ``[N,C,Q]``. Neighbours outside the image contribute zero.
    Differentiable with respect to the feature and both coordinates.
    """
    n, c, h, w = feature.shape
    if ys.shape != xs.shape or ys.ndim != 2 or ys.shape[0] != n:
        raise ValueError(f"coordinate shapes {ys.shape}, {xs.shape} do not match feature {feature.shape}")
    yd, xd = ys.data, xs.data
    if not (np.isfinite(yd).all() and np.isfinite(xd).all()):
        raise T.NonFiniteError("non-finite sampling coordinates")
    fd = feature.data
    dt = fd.dtype
    q = yd.shape[1]
    flat_feat = fd.reshape(n, c, h * w)
    corners, wy, wx = _bilinear_terms(yd, xd, h, w)
    wy = wy.astype(dt)
    wx = wx.astype(dt)
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    rows = np.arange(n)[:, None]
    vals = []
    out = np.zeros((n, c, q), dtype=dt)
    for (idx, valid), wt in zip(corners, weights):
        v = flat_feat[rows, :, idx].transpose(0, 2, 1) * valid[:, None, :]  # [N,C,Q]
        vals.append(v)
        out += wt[:, None, :] * v

    def backward(g):
        gf = gy = gx = None
        if feature.requires_grad:
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            idxs, ws = [], []
            for (idx, valid), wt in zip(corners, weights):
                idxs.append((base + idx[:, None, :]).ravel())
                ws.append((g * (wt * valid)[:, None, :]).ravel())
            gf = np.bincount(np.concatenate(idxs), weights=np.concatenate(ws),
                             minlength=n * c * h * w).astype(dt).reshape(n, c, h, w)
        v00, v01, v10, v11 = vals
        if ys.requires_grad:
            dy = (1 - wx)[:, None, :] * (v10 - v00) + wx[:, None, :] * (v11 - v01)
            gy = (g * dy).sum(axis=1)
        if xs.requires_grad:
            dx = (1 - wy)[:, None, :] * (v01 - v00) + wy[:, None, :] * (v11 - v10)
            gx = (g * dx).sum(axis=1)
        return gf, gy, gx

    return make_op(out, (feature, ys, xs), backward, "bilinear_sample")


def bilinear_sample(feature: Tensor, coords: Tensor) -> Tensor:
    """Sample ``feature [C,H,W]`` at ``coords [2,H',W']`` given as (y, x)."""
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ValueError(f"coords must be [2,H,W], got {coords.shape}")
    c = feature.shape[0]
    hq, wq = coords.shape[1:]
    flat = T.reshape(coords, (2, hq * wq))
    ys = T.slice_axis(flat, 0, 0, 1)
    xs = T.slice_axis(flat, 0, 1, 2)
    f4 = T.reshape(feature, (1,) + feature.shape)
    out = gather_bilinear(f4, ys, xs)
    return T.reshape(out, (c, hq, wq))


_TAPS = [(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)]


def _tap_grid(h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Base sampling positions n + n_i as [9,H,W] arrays (y, x)."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    gy = np.stack([yy + ky for ky, _ in _TAPS]).astype(dtype)
    gx = np.stack([xx + kx for _, kx in _TAPS]).astype(dtype)
    return gy, gx


def deform_conv2d(x: Tensor, offsets: Tensor, masks: Tensor, weight: Tensor,
                  bias: Optional[Tensor] = None) -> Tensor:
    """Modulated 3x3 deformable convolution.

    ``offsets`` is ``[18,H,W]`` (or batched) holding (dy, dx) per tap in
    row-major tap order; ``masks`` is ``[9,H,W]`` with values in [0, 1].
    Each output pixel sums ``W_i * x(n + n_i + offset_i) * mask_i`` over the
    nine taps, sampling bilinearly with zero padding.
    """
    x4, squeeze = _batched(x)
    off4, _ = _batched(offsets)
    m4, _ = _batched(masks)
    n, c, h, w = x4.shape
    if m4.shape[1] != 9 or off4.shape[1] != 18:
        raise ValueError(f"deformable field must have K=9 taps, got offsets {offsets.shape}, masks {masks.shape}")
    if off4.shape[0] != n or off4.shape[2:] != (h, w) or m4.shape[0] != n or m4.shape[2:] != (h, w):
        raise ValueError("deformable field does not match the input's spatial extent")
    if weight.shape[1:] != (c, 3, 3):
        raise ValueError(f"weight {weight.shape} does not match input channels {c} with a 3x3 kernel")
    md = m4.data
    if md.min() < 0 or md.max() > 1:
        raise ValueError("modulation masks must lie in [0, 1]")
    cout = weight.shape[0]

    off5 = T.reshape(off4, (n, 9, 2, h, w))
    first, second = (0, 1) if OFFSET_LAYOUT == "interleaved" else (1, 0)
    dy = T.reshape(T.slice_axis(off5, 2, first, first + 1), (n, 9 * h * w))
    dx = T.reshape(T.slice_axis(off5, 2, second, second + 1), (n, 9 * h * w))
    gy, gx = _tap_grid(h, w, x4.dtype)
    ys = T.add(dy, Tensor(np.broadcast_to(gy.reshape(1, -1), (n, 9 * h * w)).copy()))
    xs = T.add(dx, Tensor(np.broadcast_to(gx.reshape(1, -1), (n, 9 * h * w)).copy()))

    sampled = gather_bilinear(x4, ys, xs)                       # [N,C,9HW]
    sampled = T.reshape(sampled, (n, c, 9, h, w))
    modulated = T.mul(sampled, T.reshape(m4, (n, 1, 9, h, w)))
    cols = T.reshape(modulated, (n, c * 9, h * w))
    out = T.matmul(T.reshape(weight, (cout, c * 9)), cols)     # [N,Cout,HW]
    out = T.reshape(out, (n, cout, h, w))
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, cout, 1, 1)))
    return _unbatch(out, squeeze)
