"""Volumetric ops with hand-written backward rules.

All functions take and return :class:`~dbisl.tensor.Tensor` objects laid out
as ``[B, C, D, H, W]``.
"""
from __future__ import annotations

import numpy as np

from .errors import EvenKernel, ShapeMismatch
from .tensor import Tensor, make_node


def _check5(x, channels=None, what="input"):
    if x.ndim != 5:
        raise ShapeMismatch(f"{what} must be rank 5 [B,C,D,H,W], got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeMismatch(f"{what} must have {channels} channel(s), got {x.shape[1]}")


def _weights(kernel):
    w = kernel.weights if hasattr(kernel, "weights") else kernel
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    if w.ndim != 3 or len(set(w.shape)) != 1:
        raise ShapeMismatch(f"kernel must be cubic, got {w.shape}")
    if w.shape[0] % 2 == 0:
        raise EvenKernel(f"kernel extent {w.shape[0]} is even")
    return w


def _taps(extent):
    r = extent // 2
    rng = range(-r, r + 1)
    return [(dz, dy, dx) for dz in rng for dy in rng for dx in rng]


def _window(dz, dy, dx, r, shape):
    d, h, w = shape
    return (Ellipsis, slice(r + dz, r + dz + d), slice(r + dy, r + dy + h),
            slice(r + dx, r + dx + w))


def _unpad_replicate(gp, r):
    """Adjoint of edge padding: fold padded borders back onto the edge voxels."""
    g = gp
    for axis in (2, 3, 4):
        n = g.shape[axis] - 2 * r
        head = np.take(g, range(r), axis=axis).sum(axis=axis, keepdims=True)
        tail = np.take(g, range(r + n, 2 * r + n), axis=axis).sum(axis=axis, keepdims=True)
        core = np.take(g, range(r, r + n), axis=axis)
        first = [slice(None)] * 5
        last = [slice(None)] * 5
        first[axis] = slice(0, 1)
        last[axis] = slice(n - 1, n)
        core[tuple(first)] += head
        core[tuple(last)] += tail
        g = core
    return g


def conv3d_fixed(x, kernel):
    """Correlate a single-channel volume with a constant kernel, replicate border.

    The kernel is never trained; only ``x`` receives a gradient.
    """
    _check5(x, channels=1)
    w = _weights(kernel).astype(x.dtype)
    r = w.shape[0] // 2
    pad = ((0, 0), (0, 0), (r, r), (r, r), (r, r))
    xp = np.pad(x.data, pad, mode="edge")
    spatial = x.shape[2:]
    out = np.zeros_like(x.data)
    taps = _taps(w.shape[0])
    for dz, dy, dx in taps:
        out += w[dz + r, dy + r, dx + r] * xp[_window(dz, dy, dx, r, spatial)]

    def bw(g):
        gp = np.zeros_like(xp)
        for dz, dy, dx in taps:
            gp[_window(dz, dy, dx, r, spatial)] += w[dz + r, dy + r, dx + r] * g
        return (_unpad_replicate(gp, r),)
    return make_node(out, (x,), bw, "conv3d_fixed")


def softmin_propagate(values, band, h, extent=3):
    """One log-domain convolution step with the radial kernel exp(-|o|/h).

    For each voxel v this evaluates ``-h*log(sum_j exp(-(values[j] + |j-v|)/h))``
    over band voxels ``j`` inside the ``extent``^3 window around ``v``; that is
    ``-h*log(conv(exp(-values/h), K))`` computed without overflow. Voxels with
    no band voxel in their window are unreached: their output is 0 and they
    are flagged False in the returned mask. Outside the volume acts as empty
    (no virtual sources).
    """
    _check5(values)
    band = np.asarray(band, dtype=bool)
    if band.shape != values.shape:
        raise ShapeMismatch(f"band {band.shape} vs values {values.shape}")
    if extent % 2 == 0:
        raise EvenKernel(f"kernel extent {extent} is even")
    r = extent // 2
    dt = values.dtype
    spatial = values.shape[2:]
    taps = _taps(extent)
    dist = [np.sqrt(dz * dz + dy * dy + dx * dx) for dz, dy, dx in taps]
    vp = np.pad(np.where(band, values.data, np.inf),
                ((0, 0), (0, 0), (r, r), (r, r), (r, r)), constant_values=np.inf)
    cand = np.empty((len(taps),) + values.shape, dtype=dt)
    for t, (dz, dy, dx) in enumerate(taps):
        np.add(vp[_window(dz, dy, dx, r, spatial)], dist[t], out=cand[t])
    m = cand.min(axis=0)
    reach = np.isfinite(m)
    m0 = np.where(reach, m, 0).astype(dt, copy=False)
    with np.errstate(invalid="ignore", over="ignore"):
        wts = np.exp(-(cand - m0) / h)
    wts[:, ~reach] = 0
    total = wts.sum(axis=0)
    total[~reach] = 1
    out = np.where(reach, m0 - h * np.log(total), 0).astype(dt, copy=False)
    wts /= total

    def bw(g):
        gp = np.zeros(vp.shape, dtype=dt)
        for t, (dz, dy, dx) in enumerate(taps):
            gp[_window(dz, dy, dx, r, spatial)] += g * wts[t]
        core = gp[:, :, r:r + spatial[0], r:r + spatial[1], r:r + spatial[2]]
        return (np.where(band, core, 0),)
    return make_node(out, (values,), bw, "softmin_propagate"), reach


# -- network layers ---------------------------------------------------------------
try:  # compute kernels only; differentiation stays on our tape
    import torch
    from torch.nn.grad import conv3d_input as _t_conv_input
    from torch.nn.grad import conv3d_weight as _t_conv_weight
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

CONV_BACKEND = "torch" if torch is not None else "numpy"


def _conv_numpy(xd, wd, r):
    """Reference 3x3x3 correlation via channel-last im2col."""
    B, ci, D, H, W = xd.shape
    k = wd.shape[2]
    xl = np.pad(xd.transpose(0, 2, 3, 4, 1), ((0, 0), (r, r), (r, r), (r, r), (0, 0)))
    cols = np.empty((B, D, H, W, k ** 3, ci), dtype=xd.dtype)
    for t, (i, j, l) in enumerate(np.ndindex(k, k, k)):
        cols[:, :, :, :, t, :] = xl[:, i:i + D, j:j + H, l:l + W, :]
    cols = cols.reshape(-1, k ** 3 * ci)
    wm = wd.transpose(0, 2, 3, 4, 1).reshape(wd.shape[0], -1)
    return cols, wm


def _conv_forward(xd, wd, r, backend):
    if backend == "torch":
        return torch.nn.functional.conv3d(torch.from_numpy(xd), torch.from_numpy(wd),
                                          padding=r).numpy()
    B, _, D, H, W = xd.shape
    cols, wm = _conv_numpy(xd, wd, r)
    y = cols @ wm.T
    return np.ascontiguousarray(y.reshape(B, D, H, W, -1).transpose(0, 4, 1, 2, 3))


def _conv_backward(xd, wd, g, r, backend, need_x):
    if backend == "torch":
        tx, tw, tg = torch.from_numpy(xd), torch.from_numpy(wd), torch.from_numpy(g)
        gw = _t_conv_weight(tx, wd.shape, tg, padding=r).numpy()
        gx = _t_conv_input(xd.shape, tw, tg, padding=r).numpy() if need_x else None
        return gx, gw
    B, ci, D, H, W = xd.shape
    co, k = wd.shape[0], wd.shape[2]
    cols, wm = _conv_numpy(xd, wd, r)
    gy = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
    gw = (gy.T @ cols).reshape(co, k, k, k, ci).transpose(0, 4, 1, 2, 3)
    gx = None
    if need_x:
        gc = (gy @ wm).reshape(B, D, H, W, k ** 3, ci)
        gxl = np.zeros((B, D + 2 * r, H + 2 * r, W + 2 * r, ci), dtype=xd.dtype)
        for t, (i, j, l) in enumerate(np.ndindex(k, k, k)):
            gxl[:, i:i + D, j:j + H, l:l + W, :] += gc[:, :, :, :, t, :]
        gx = np.ascontiguousarray(gxl[:, r:r + D, r:r + H, r:r + W, :].transpose(0, 4, 1, 2, 3))
    return gx, np.ascontiguousarray(gw)


def conv3d(x, w, b, backend=None):
    """3x3x3 convolution, stride 1, zero padding 1.

    The correlation itself runs on torch's CPU kernel when available and on a
    numpy im2col path otherwise; the backward rule is recorded on our tape.
    """
    _check5(x)
    backend = backend or CONV_BACKEND
    ci, k = w.shape[1], w.shape[2]
    if x.shape[1] != ci:
        raise ShapeMismatch(f"conv expects {ci} input channels, got {x.shape[1]}")
    r = k // 2
    out = _conv_forward(x.data, w.data, r, backend) + b.data[None, :, None, None, None]

    def bw(g):
        g = np.ascontiguousarray(g)
        gx, gw = _conv_backward(x.data, w.data, g, r, backend, x.requires_grad)
        return gx, gw, g.sum(axis=(0, 2, 3, 4))
    return make_node(out, (x, w, b), bw, "conv3d")


def conv1x1(x, w, b):
    """Pointwise channel mixing, ``w`` shaped [Co, Ci]."""
    _check5(x)
    B, ci, D, H, W = x.shape
    co = w.shape[0]
    if w.shape[1] != ci:
        raise ShapeMismatch(f"conv1x1 expects {w.shape[1]} channels, got {ci}")
    xf = x.data.reshape(B, ci, -1)
    out = (np.matmul(w.data, xf) + b.data[None, :, None]).reshape(B, co, D, H, W)

    def bw(g):
        gf = g.reshape(B, co, -1)
        gx = np.matmul(w.data.T, gf).reshape(x.shape)
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)
        return gx, gw, gf.sum(axis=(0, 2))
    return make_node(out, (x, w, b), bw, "conv1x1")


def down2(x, w, b):
    """2x2x2 convolution with stride 2; ``w`` shaped [Co, Ci, 2, 2, 2]."""
    _check5(x)
    B, ci, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} not divisible by 2")
    co = w.shape[0]
    d, h, wd = D // 2, H // 2, W // 2
    blocks = x.data.reshape(B, ci, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    cols = blocks.reshape(-1, ci * 8)
    wm = w.data.reshape(co, -1)
    out = np.ascontiguousarray((cols @ wm.T + b.data).reshape(B, d, h, wd, co)
                               .transpose(0, 4, 1, 2, 3))

    def bw(g):
        gy = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        gc = (gy @ wm).reshape(B, d, h, wd, ci, 2, 2, 2)
        gx = gc.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(x.shape)
        return gx, (gy.T @ cols).reshape(w.shape), gy.sum(axis=0)
    return make_node(out, (x, w, b), bw, "down2")


def up2(x, w, b):
    """Transposed 2x2x2 convolution with stride 2; ``w`` shaped [Ci, Co, 2, 2, 2]."""
    _check5(x)
    B, ci, d, h, wd = x.shape
    co = w.shape[1]
    xf = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, ci)
    wm = w.data.reshape(ci, co * 8)
    y = (xf @ wm).reshape(B, d, h, wd, co, 2, 2, 2)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, co, 2 * d, 2 * h, 2 * wd)
    out = out + b.data[None, :, None, None, None]

    def bw(g):
        gb = g.sum(axis=(0, 2, 3, 4))
        gy = g.reshape(B, co, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        gy = gy.reshape(-1, co * 8)
        gx = (gy @ wm.T).reshape(B, d, h, wd, ci).transpose(0, 4, 1, 2, 3)
        gw = (xf.T @ gy).reshape(w.shape)
        return np.ascontiguousarray(gx), gw, gb
    return make_node(np.ascontiguousarray(out), (x, w, b), bw, "up2")


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel standardization over the spatial axes."""
    _check5(x)
    axes = (2, 3, 4)
    n = int(np.prod(x.shape[2:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).sum(axis=axes, keepdims=True) / n
        return (inv * (g - gm - xhat * gxm),)
    return make_node(xhat.astype(x.dtype, copy=False), (x,), bw, "instance_norm")


def dropout(x, p, rng):
    """Inverted dropout with a mask drawn from ``rng``."""
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _interp_matrix(n_in, n_out, dtype):
    """Linear interpolation weights (half-pixel centers, edge clamped)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def resize_trilinear(x, out_shape):
    """Separable trilinear resampling of the three spatial axes to ``out_shape``."""
    _check5(x)
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 3 or min(out_shape) < 1:
        raise ShapeMismatch(f"bad target shape {out_shape}")
    if out_shape == x.shape[2:]:
        return make_node(x.data.copy(), (x,), lambda g: (g,), "resize")
    mats = [_interp_matrix(n, m, x.dtype) for n, m in zip(x.shape[2:], out_shape)]
    md, mh, mw = mats
    B, C, D, H, W = x.shape
    Do, Ho, Wo = out_shape
    y = x.data @ mw.T                                   # B,C,D,H,Wo
    y = mh @ y                                          # B,C,D,Ho,Wo
    y = (md @ y.reshape(B, C, D, Ho * Wo)).reshape(B, C, Do, Ho, Wo)

    def bw(g):
        g = (md.T @ g.reshape(B, C, Do, Ho * Wo)).reshape(B, C, D, Ho, Wo)
        g = mh.T @ g
        return (np.ascontiguousarray(g @ mw),)
    return make_node(np.ascontiguousarray(y), (x,), bw, "resize")
