"""Shared test helpers: independent brute-force oracles and a central
finite-difference gradient checker.

Everything here is written as plain loops on purpose; these functions are
the reference the vectorised implementations are judged against and must
not share code with them.
"""

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=50)
settings.load_profile("ci")


def finite_difference(param, scalar_fn, h=1e-5, coords=None):
    """Central-difference gradient of scalar_fn with respect to `param`.

    Mutates `param` in place during probing and restores it.  When `coords`
    is given, only those flat indices are probed (returned in that order);
    otherwise the full gradient array is returned.
    """
    flat = param.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        out = np.zeros_like(param)
        out_flat = out.reshape(-1)
    else:
        out = np.zeros(len(coords), dtype=param.dtype)
        out_flat = out
    for slot, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = scalar_fn()
        flat[idx] = orig - h
        f_minus = scalar_fn()
        flat[idx] = orig
        out_flat[slot if out is out_flat else idx] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------

def conv2d_oracle(x, kernels, bias, stride, pad):
    """Direct six-loop convolution with explicit zero padding."""
    b, cin, h, w = x.shape
    out_c, _, k, _ = kernels.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    out = np.zeros((b, out_c, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for o in range(out_c):
            for y in range(oh):
                for xx in range(ow):
                    acc = bias[o]
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += (
                                    kernels[o, c, i, j]
                                    * xp[bi, c, y * stride + i, xx * stride + j]
                                )
                    out[bi, o, y, xx] = acc
    return out


def clipped_window_max(plane, y0, x0, kh, kw):
    """Max over the window anchored at (y0, x0), clipped to the image."""
    h, w = plane.shape
    best = None
    for dy in range(kh):
        for dx in range(kw):
            r, c = y0 + dy, x0 + dx
            if r < h and c < w:
                v = plane[r, c]
                if best is None or v > best:
                    best = v
    return best


def maxpool_oracle(x, kernel, stride):
    """Window-by-window clipped max pooling."""
    b, c, h, w = x.shape
    oh = (h - 1) // stride + 1
    ow = (w - 1) // stride + 1
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    out[bi, ci, oy, ox] = clipped_window_max(
                        x[bi, ci], oy * stride, ox * stride, kernel, kernel
                    )
    return out


def residual_pool_oracle(x, s):
    """Literal split / chained-pool / concat / downsample composition."""
    b, n, h, w = x.shape
    assert n % s == 0
    width = n // s
    ys = []
    prev = None
    for i in range(s):
        xi = x[:, i * width : (i + 1) * width]
        fed = xi if prev is None else xi + prev
        yi = maxpool_oracle(fed, 2, 1)
        ys.append(yi)
        prev = yi
    z = np.concatenate(ys, axis=1)
    return maxpool_oracle(z, 2, 2)


def stacked_pool_oracle(x):
    """Mean of the sequential kernel-2 / kernel-4 stride-1 pools, downsampled."""
    m2 = maxpool_oracle(x, 2, 1)
    m4 = maxpool_oracle(m2, 4, 1)
    return maxpool_oracle((m2 + m4) * 0.5, 2, 2)


def bilinear_sample_oracle(plane, row, col):
    """Clamped bilinear interpolation with the low-side cell convention."""
    h, w = plane.shape
    row = min(max(0.0, row), float(h - 1))
    col = min(max(0.0, col), float(w - 1))
    r0 = int(np.floor(row))
    fr = row - r0
    if fr == 0.0 and r0 > 0:
        r0, fr = r0 - 1, 1.0
    c0 = int(np.floor(col))
    fc = col - c0
    if fc == 0.0 and c0 > 0:
        c0, fc = c0 - 1, 1.0
    r1 = min(r0 + 1, h - 1)
    c1 = min(c0 + 1, w - 1)
    return (
        (1 - fr) * (1 - fc) * plane[r0, c0]
        + (1 - fr) * fc * plane[r0, c1]
        + fr * (1 - fc) * plane[r1, c0]
        + fr * fc * plane[r1, c1]
    )


def deformable_conv_oracle(x, main_kernels, main_bias, offsets):
    """Loop evaluation of the deformed convolution in the padded frame."""
    b, cin, h, w = x.shape
    out_c, _, k, _ = main_kernels.shape
    pad = (k - 1) // 2
    xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    out = np.zeros((b, out_c, h, w), dtype=x.dtype)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                for o in range(out_c):
                    acc = main_bias[o]
                    for i in range(k):
                        for j in range(k):
                            m = i * k + j
                            dx = offsets[bi, 2 * m, y, xx]
                            dy = offsets[bi, 2 * m + 1, y, xx]
                            for c in range(cin):
                                acc += main_kernels[o, c, i, j] * bilinear_sample_oracle(
                                    xp[bi, c], (y + i) + dy, (xx + j) + dx
                                )
                    out[bi, o, y, xx] = acc
    return out


@pytest.fixture
def rng64():
    from drnet.tensor import Rng

    return Rng(20240501, 0)
