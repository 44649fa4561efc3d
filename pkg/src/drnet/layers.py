"""Forward and backward passes for every layer of the network.

All backward passes are exact analytic gradients of the forward
expressions, written against plain numpy arrays in (batch, channel,
height, width) layout.  Subgradient conventions at kinks:

* max-pooling ties resolve to the first element in row-major window order;
* ReLU has subgradient 0 at 0;
* a deformed sampling coordinate clamped at the border passes zero
  gradient to its offset (the clamped coordinate is locally constant);
* an exactly integral interior sampling coordinate uses the bilinear cell
  on its low side.

The ``*_forward_cached`` variants return the forward byproducts so a
training loop can hand them back to the backward pass instead of paying
for a recompute; the plain signatures always work without a cache.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import ArgumentError, ConfigError, ShapeError


def _as4d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (b, c, h, w), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# standard convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    """2-D convolution parameters: kernels (out_c, in_c, k, k) and bias (out_c,)."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        k = self.kernels
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise ShapeError(f"kernels must be (out_c, in_c, k, k), got {k.shape}")
        if k.shape[2] % 2 != 1:
            raise ConfigError(f"kernel size must be odd, got {k.shape[2]}")
        if self.bias.shape != (k.shape[0],):
            raise ShapeError(f"bias must be ({k.shape[0]},), got {self.bias.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ConfigError("stride must be >= 1 and pad >= 0")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def k(self) -> int:
        return self.kernels.shape[2]


def _conv_out_size(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"convolution output is empty for input {h}x{w}, k={k}")
    return oh, ow


def _pad_zeros(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Padded input -> column matrix (b, c*k*k, oh*ow); position m = i*k + j."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k * k, oh * ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, i * k + j, :] = patch.reshape(b, c, oh * ow)
    return cols.reshape(b, c * k * k, oh * ow)


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    b, c, h, w = x_shape
    g = gcols.reshape(b, c, k * k, oh, ow)
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                g[:, :, i * k + j]
            )
    if pad == 0:
        return gxp
    return gxp[:, :, pad : pad + h, pad : pad + w].copy()


def _check_conv_input(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    x = _as4d(x, "conv input")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    if x.dtype != layer.kernels.dtype:
        raise ArgumentError(
            f"dtype mismatch: input {x.dtype} vs kernels {layer.kernels.dtype}"
        )
    return x


class ConvCache(NamedTuple):
    cols: np.ndarray
    oh: int
    ow: int


def conv2d_forward_cached(layer: ConvLayer, x: np.ndarray):
    x = _check_conv_input(layer, x)
    b, _, h, w = x.shape
    oh, ow = _conv_out_size(h, w, layer.k, layer.stride, layer.pad)
    cols = _im2col(_pad_zeros(x, layer.pad), layer.k, layer.stride, oh, ow)
    out = np.matmul(layer.kernels.reshape(layer.out_channels, -1), cols)
    out += layer.bias[:, None]
    return out.reshape(b, layer.out_channels, oh, ow), ConvCache(cols, oh, ow)


def conv2d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """out(b,o,y,x) = bias_o + sum_{c,i,j} w(o,c,i,j) * x_pad(b,c,y*s+i,x*s+j)."""
    return conv2d_forward_cached(layer, x)[0]


def conv2d_backward(layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray,
                    cache: ConvCache | None = None):
    """Gradients (grad_x, grad_kernels, grad_bias) of the forward expression."""
    x = _check_conv_input(layer, x)
    b, _, h, w = x.shape
    oh, ow = _conv_out_size(h, w, layer.k, layer.stride, layer.pad)
    grad_out = _as4d(grad_out, "grad_out")
    if grad_out.shape != (b, layer.out_channels, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"{(b, layer.out_channels, oh, ow)}"
        )
    if cache is None:
        cols = _im2col(_pad_zeros(x, layer.pad), layer.k, layer.stride, oh, ow)
    else:
        cols = cache.cols
    g = grad_out.reshape(b, layer.out_channels, oh * ow)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_kernels = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(
        layer.kernels.shape
    )
    gcols = np.matmul(layer.kernels.reshape(layer.out_channels, -1).T, g)
    grad_x = _col2im(gcols, x.shape, layer.k, layer.stride, layer.pad, oh, ow)
    return grad_x, grad_kernels, grad_bias


# ---------------------------------------------------------------------------
# deformable convolution
# ---------------------------------------------------------------------------

@dataclass
class DeformableConvLayer:
    """Main convolution sampled at offset-displaced locations.

    The offset branch maps the input to 2*k*k channels: channel 2m holds
    the horizontal displacement and channel 2m+1 the vertical displacement
    of kernel position m (row-major over the k x k grid).  Sampling happens
    in the zero-padded frame of the main convolution and coordinates are
    clamped to that frame, so a zero offset field reproduces the standard
    convolution exactly.
    """

    offset_branch: ConvLayer
    main: ConvLayer

    def __post_init__(self):
        k = self.main.k
        if self.main.stride != 1 or self.main.pad != (k - 1) // 2:
            raise ConfigError(
                "deformable main conv must be stride 1 with shape-preserving padding"
            )
        ob = self.offset_branch
        if ob.stride != 1 or ob.pad != (ob.k - 1) // 2:
            raise ConfigError("offset branch must be stride 1, shape-preserving")
        if ob.out_channels != 2 * k * k:
            raise ShapeError(
                f"offset branch must emit {2 * k * k} channels, got {ob.out_channels}"
            )
        if ob.in_channels != self.main.in_channels:
            raise ShapeError("offset branch and main conv must share input channels")


class DeformableConvGrads(NamedTuple):
    grad_x: np.ndarray
    grad_main_kernels: np.ndarray
    grad_offset_kernels: np.ndarray
    grad_offset_bias: np.ndarray
    grad_bias: np.ndarray


class DeformCache(NamedTuple):
    offsets: np.ndarray
    offset_cols: np.ndarray     # im2col of x, reused by the offset branch backward
    xp: np.ndarray              # zero-padded input
    raw_r: np.ndarray           # unclamped sampling rows, (b, n)
    raw_c: np.ndarray           # unclamped sampling columns, (b, n)
    cols: np.ndarray            # sampled column matrix (b, c*k*k, oh*ow)


def _low_side_cells(coord: np.ndarray, bound: int):
    """Floor cells for bilinear sampling with the low-side convention.

    An exactly integral coordinate q > 0 uses cell [q-1, q] with fraction 1,
    which leaves values unchanged but pins the subgradient to the low side.
    For clamped coordinates in [0, bound-1] this keeps the high corner
    c0 + 1 within bounds whenever bound >= 2.
    """
    c0 = np.floor(coord)
    frac = coord - c0
    shift = (frac == 0.0) & (c0 > 0)
    c0 = np.where(shift, c0 - 1.0, c0)
    frac = np.where(shift, frac.dtype.type(1.0), frac)
    c0i = c0.astype(np.int64)
    c1i = np.minimum(c0i + 1, bound - 1)
    return c0i, c1i, frac


@njit(cache=True)
def _sample_cols_kernel(xp, raw_r, raw_c, cols):
    """Clamp, pick the low-side bilinear cell, and build sampled columns.

    The clamp is written with negated comparisons so a non-finite
    coordinate lands on a valid corner instead of corrupting memory; the
    resulting NaN values then surface through the loss check.
    """
    b, c, hp, wp = xp.shape
    n = raw_r.shape[1]
    for bi in range(b):
        for s in range(n):
            rr = raw_r[bi, s]
            cc = raw_c[bi, s]
            if not (rr > 0.0):
                rr = 0.0
            elif rr > hp - 1:
                rr = hp - 1
            if not (cc > 0.0):
                cc = 0.0
            elif cc > wp - 1:
                cc = wp - 1
            r0 = int(np.floor(rr))
            fr = rr - r0
            if fr == 0.0 and r0 > 0:
                r0 -= 1
                fr = 1.0
            c0 = int(np.floor(cc))
            fc = cc - c0
            if fc == 0.0 and c0 > 0:
                c0 -= 1
                fc = 1.0
            w00 = (1.0 - fr) * (1.0 - fc)
            w01 = (1.0 - fr) * fc
            w10 = fr * (1.0 - fc)
            w11 = fr * fc
            for ci in range(c):
                cols[bi, ci, s] = (
                    w00 * xp[bi, ci, r0, c0]
                    + w01 * xp[bi, ci, r0, c0 + 1]
                    + w10 * xp[bi, ci, r0 + 1, c0]
                    + w11 * xp[bi, ci, r0 + 1, c0 + 1]
                )


@njit(cache=True)
def _sample_grads_kernel(xp, raw_r, raw_c, gcols, gxp, gdx, gdy):
    """Scatter column gradients to the bilinear corners and accumulate the
    per-sample coordinate gradients (zero where the clamp was active)."""
    b, c, hp, wp = xp.shape
    n = raw_r.shape[1]
    for bi in range(b):
        for s in range(n):
            rr = raw_r[bi, s]
            cc = raw_c[bi, s]
            clamp_r = not (rr > 0.0) or rr > hp - 1
            clamp_c = not (cc > 0.0) or cc > wp - 1
            if not (rr > 0.0):
                rr = 0.0
            elif rr > hp - 1:
                rr = hp - 1
            if not (cc > 0.0):
                cc = 0.0
            elif cc > wp - 1:
                cc = wp - 1
            r0 = int(np.floor(rr))
            fr = rr - r0
            if fr == 0.0 and r0 > 0:
                r0 -= 1
                fr = 1.0
            c0 = int(np.floor(cc))
            fc = cc - c0
            if fc == 0.0 and c0 > 0:
                c0 -= 1
                fc = 1.0
            w00 = (1.0 - fr) * (1.0 - fc)
            w01 = (1.0 - fr) * fc
            w10 = fr * (1.0 - fc)
            w11 = fr * fc
            gx = 0.0
            gy = 0.0
            for ci in range(c):
                g = gcols[bi, ci, s]
                v00 = xp[bi, ci, r0, c0]
                v01 = xp[bi, ci, r0, c0 + 1]
                v10 = xp[bi, ci, r0 + 1, c0]
                v11 = xp[bi, ci, r0 + 1, c0 + 1]
                gxp[bi, ci, r0, c0] += g * w00
                gxp[bi, ci, r0, c0 + 1] += g * w01
                gxp[bi, ci, r0 + 1, c0] += g * w10
                gxp[bi, ci, r0 + 1, c0 + 1] += g * w11
                gx += g * ((1.0 - fr) * (v01 - v00) + fr * (v11 - v10))
                gy += g * ((1.0 - fc) * (v10 - v00) + fc * (v11 - v01))
            gdx[bi, s] = 0.0 if clamp_c else gx
            gdy[bi, s] = 0.0 if clamp_r else gy


def _deform_cache(layer: DeformableConvLayer, x: np.ndarray) -> DeformCache:
    """Offsets, unclamped sampling coordinates, and the sampled columns."""
    k = layer.main.k
    k2 = k * k
    offset_cols = _im2col(_pad_zeros(x, layer.offset_branch.pad),
                          layer.offset_branch.k, 1, x.shape[2], x.shape[3])
    ob = layer.offset_branch
    offsets = np.matmul(ob.kernels.reshape(ob.out_channels, -1), offset_cols)
    offsets += ob.bias[:, None]
    offsets = offsets.reshape(x.shape[0], ob.out_channels, x.shape[2], x.shape[3])

    xp = _pad_zeros(x, layer.main.pad)
    b, cin, hp, wp = xp.shape
    if hp < 2 or wp < 2:
        raise ShapeError("deformable sampling requires padded extents >= 2")
    oh, ow = offsets.shape[2], offsets.shape[3]
    dtype = x.dtype
    ki = np.repeat(np.arange(k), k)
    kj = np.tile(np.arange(k), k)
    base_r = (ki[:, None, None] + np.arange(oh)[None, :, None]).astype(dtype)
    base_c = (kj[:, None, None] + np.arange(ow)[None, None, :]).astype(dtype)
    n = k2 * oh * ow
    raw_c = np.ascontiguousarray((base_c[None] + offsets[:, 0::2]).reshape(b, n))
    raw_r = np.ascontiguousarray((base_r[None] + offsets[:, 1::2]).reshape(b, n))
    cols = np.empty((b, cin, n), dtype=dtype)
    _sample_cols_kernel(xp, raw_r, raw_c, cols)
    cols = cols.reshape(b, cin * k2, oh * ow)
    return DeformCache(offsets, offset_cols, xp, raw_r, raw_c, cols)


def deformable_conv_forward_cached(layer: DeformableConvLayer, x: np.ndarray):
    x = _check_conv_input(layer.main, x)
    cache = _deform_cache(layer, x)
    b = x.shape[0]
    oh, ow = cache.offsets.shape[2], cache.offsets.shape[3]
    out = np.matmul(layer.main.kernels.reshape(layer.main.out_channels, -1),
                    cache.cols)
    out += layer.main.bias[:, None]
    return out.reshape(b, layer.main.out_channels, oh, ow), cache


def deformable_conv_forward(layer: DeformableConvLayer, x: np.ndarray) -> np.ndarray:
    """Main convolution evaluated at clamped, bilinearly sampled locations."""
    return deformable_conv_forward_cached(layer, x)[0]


def deformable_conv_backward(layer: DeformableConvLayer, x: np.ndarray,
                             grad_out: np.ndarray,
                             cache: DeformCache | None = None) -> DeformableConvGrads:
    """Gradients through the main kernels, the bilinear sampler, and the
    offset branch."""
    x = _check_conv_input(layer.main, x)
    if cache is None:
        cache = _deform_cache(layer, x)
    xp = cache.xp
    b, cin, hp, wp = xp.shape
    k2 = layer.main.k ** 2
    oh, ow = cache.offsets.shape[2], cache.offsets.shape[3]
    grad_out = _as4d(grad_out, "grad_out")
    if grad_out.shape != (b, layer.main.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output")
    dtype = x.dtype
    n = k2 * oh * ow

    g = grad_out.reshape(b, layer.main.out_channels, oh * ow)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_main_kernels = np.tensordot(g, cache.cols, axes=([0, 2], [0, 2])).reshape(
        layer.main.kernels.shape
    )
    gcols = np.ascontiguousarray(
        np.matmul(layer.main.kernels.reshape(layer.main.out_channels, -1).T, g)
    ).reshape(b, cin, n)

    gxp = np.zeros_like(xp)
    gdx = np.empty((b, n), dtype=dtype)
    gdy = np.empty((b, n), dtype=dtype)
    _sample_grads_kernel(xp, cache.raw_r, cache.raw_c, gcols, gxp, gdx, gdy)
    pad = layer.main.pad
    grad_x_direct = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]

    grad_offsets = np.empty_like(cache.offsets)
    grad_offsets[:, 0::2] = gdx.reshape(b, k2, oh, ow)
    grad_offsets[:, 1::2] = gdy.reshape(b, k2, oh, ow)

    gx_offsets, grad_ok, grad_ob = conv2d_backward(
        layer.offset_branch,
        x,
        grad_offsets,
        cache=ConvCache(cache.offset_cols, oh, ow),
    )
    grad_x = grad_x_direct + gx_offsets
    return DeformableConvGrads(grad_x, grad_main_kernels, grad_ok, grad_ob, grad_bias)


def deformable_sample(x: np.ndarray, offsets: np.ndarray, kernel_pos, out_pos,
                      batch: int = 0, channel: int = 0) -> float:
    """One deformed sample of ``x`` at a single kernel/output position.

    The base location is ``out_pos + kernel_pos`` in ``x``'s own frame; the
    displaced coordinate is clamped to the extents of ``x`` and bilinearly
    interpolated.  The arithmetic mirrors the vectorised convolution path
    exactly, so values agree bitwise.
    """
    x = _as4d(x, "x")
    offsets = _as4d(offsets, "offsets")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("x must have spatial extents >= 1")
    c_off = offsets.shape[1]
    k2 = c_off // 2
    k = int(round(k2 ** 0.5))
    if c_off % 2 != 0 or k * k != k2:
        raise ShapeError(f"offset field channel count {c_off} is not 2*k*k")
    i, j = kernel_pos
    y, xo = out_pos
    m = i * k + j
    dtype = x.dtype
    dx = offsets[batch, 2 * m, y, xo]
    dy = offsets[batch, 2 * m + 1, y, xo]
    h, w = x.shape[2], x.shape[3]
    rs = np.clip(np.asarray([(y + i) + dy], dtype=dtype), 0.0, dtype.type(h - 1))
    cs = np.clip(np.asarray([(xo + j) + dx], dtype=dtype), 0.0, dtype.type(w - 1))
    r0a, r1a, fra = _low_side_cells(rs, h)
    c0a, c1a, fca = _low_side_cells(cs, w)
    r0, r1, fr = int(r0a[0]), int(r1a[0]), dtype.type(fra[0])
    c0, c1, fc = int(c0a[0]), int(c1a[0]), dtype.type(fca[0])
    plane = x[batch, channel]
    one = dtype.type(1.0)
    val = (one - fr) * (one - fc) * plane[r0, c0]
    val += (one - fr) * fc * plane[r0, c1]
    val += fr * (one - fc) * plane[r1, c0]
    val += fr * fc * plane[r1, c1]
    return float(val)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool_forward(x: np.ndarray, kernel: int = 2, stride: int = 2):
    """Border-clipped window max; returns (output, argmax index map).

    Windows anchor at ``(oy*stride, ox*stride)`` and positions outside the
    image are excluded, never zero-filled.  The argmax map stores the flat
    input index of each winner (ties: first in row-major window order).
    """
    x = _as4d(x, "pool input")
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("pool input must have spatial extents >= 1")
    if kernel < 1 or stride < 1:
        raise ArgumentError("kernel and stride must be >= 1")
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    padded = np.full((b, c, h + kernel - 1, w + kernel - 1), -np.inf, dtype=x.dtype)
    padded[:, :, :h, :w] = x
    stack = np.empty((kernel * kernel, b, c, oh, ow), dtype=x.dtype)
    for di in range(kernel):
        for dj in range(kernel):
            stack[di * kernel + dj] = padded[
                :, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride
            ]
    arg = stack.argmax(axis=0)
    out = stack.max(axis=0)
    # flat input index of each winner: window-anchor base plus a small
    # per-slot delta table (avoids div/mod over the whole map)
    delta = (np.arange(kernel * kernel) // kernel) * w + np.arange(kernel * kernel) % kernel
    base = (np.arange(oh)[:, None] * stride * w + np.arange(ow)[None, :] * stride)
    argmax_map = delta[arg] + base
    return out, argmax_map


def maxpool_backward(argmax_map: np.ndarray, grad_out: np.ndarray,
                     input_shape) -> np.ndarray:
    """Route each output gradient to its recorded argmax position."""
    b, c, h, w = input_shape
    if grad_out.shape != argmax_map.shape:
        raise ShapeError("grad_out must match the argmax map shape")
    plane = h * w
    base = (np.arange(b * c, dtype=np.int64) * plane).reshape(b, c, 1, 1)
    gx = np.zeros(b * c * plane, dtype=grad_out.dtype)
    np.add.at(gx, (argmax_map + base).ravel(), np.ascontiguousarray(grad_out).ravel())
    return gx.reshape(b, c, h, w)


@dataclass
class ResidualPoolLayer:
    """Channel-split hierarchical pooling; ``s`` subsets of equal width."""

    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"subset count must be >= 1, got {self.s}")


def _check_subsets(n: int, s: int) -> int:
    if n % s != 0:
        raise ConfigError(f"channel count {n} not divisible by subset count {s}")
    return n // s


def residual_pool_forward(layer: ResidualPoolLayer, x: np.ndarray):
    """Split channels, chain shape-preserving 2x2 max pools with additive
    skips, concatenate, then downsample 2x2/stride-2.

    Returns (output, context); the context carries the recorded argmax maps
    for the exact reverse composition in the backward pass.
    """
    x = _as4d(x, "residual pool input")
    n = x.shape[1]
    width = _check_subsets(n, layer.s)
    subset_maps = []
    ys = []
    prev = None
    for i in range(layer.s):
        xi = x[:, i * width : (i + 1) * width]
        fed = xi if prev is None else xi + prev
        yi, amap = maxpool_forward(fed, kernel=2, stride=1)
        subset_maps.append(amap)
        ys.append(yi)
        prev = yi
    z = np.concatenate(ys, axis=1)
    out, down_map = maxpool_forward(z, kernel=2, stride=2)
    ctx = (subset_maps, down_map, x.shape)
    return out, ctx


def residual_pool_backward(layer: ResidualPoolLayer, ctx, grad_out: np.ndarray):
    """Exact reverse of the forward composition using the recorded argmaxes."""
    subset_maps, down_map, x_shape = ctx
    b, n, h, w = x_shape
    width = _check_subsets(n, layer.s)
    gz = maxpool_backward(down_map, grad_out, (b, n, h, w))
    parts = [None] * layer.s
    carry = None
    for i in reversed(range(layer.s)):
        g_yi = gz[:, i * width : (i + 1) * width]
        total = g_yi if carry is None else g_yi + carry
        g_fed = maxpool_backward(subset_maps[i], total, (b, width, h, w))
        parts[i] = g_fed
        carry = g_fed  # the sum fed x_i and y_{i-1} identically
    return np.concatenate(parts, axis=1)


def stacked_pool_forward(x: np.ndarray):
    """Mean of sequential stride-1 max pools (kernels 2 then 4), downsampled.

    The kernel-4 stage runs as three chained 2x2 stride-1 pools, which
    cover exactly the same clipped window set (values are identical to a
    direct 4x4 pool); at exact ties the recorded winner can be a different
    copy of the same maximal value.  Returns (output, context) like the
    other pooling ops.
    """
    x = _as4d(x, "stacked pool input")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("stacked pool requires spatial extents >= 2")
    m2, map2 = maxpool_forward(x, kernel=2, stride=1)
    chain_maps = []
    m4 = m2
    for _ in range(3):
        m4, amap = maxpool_forward(m4, kernel=2, stride=1)
        chain_maps.append(amap)
    mean = (m2 + m4) * x.dtype.type(0.5)
    out, down_map = maxpool_forward(mean, kernel=2, stride=2)
    ctx = (map2, chain_maps, down_map, x.shape)
    return out, ctx


def stacked_pool_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    map2, chain_maps, down_map, x_shape = ctx
    b, c, h, w = x_shape
    gmean = maxpool_backward(down_map, grad_out, (b, c, h, w))
    half = grad_out.dtype.type(0.5)
    g4 = gmean * half
    for amap in reversed(chain_maps):
        g4 = maxpool_backward(amap, g4, (b, c, h, w))
    gm2 = gmean * half + g4
    return maxpool_backward(map2, gm2, x_shape)


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * mask


@dataclass
class FCLayer:
    """Affine map: weight (out_features, in_features), bias (out_features,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("fc weight must be 2-D with matching bias")


def fc_forward(layer: FCLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(
            f"fc input must be (batch, {layer.weight.shape[1]}), got {x.shape}"
        )
    return x @ layer.weight.T + layer.bias


def fc_backward(layer: FCLayer, x: np.ndarray, grad_out: np.ndarray):
    grad_x = grad_out @ layer.weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch, stabilised by max subtraction.

    Returns (loss, grad_logits) with grad scaled by 1/batch so it is the
    gradient of the returned mean.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError("labels must be one per batch element")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ArgumentError("labels must be 0 (unchanged) or 1 (changed)")
    labels = labels.astype(np.int64)
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    lse = np.log(denom[:, 0])
    loss = float((lse - z[np.arange(b), labels]).mean())
    grad = p.copy()
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype)
