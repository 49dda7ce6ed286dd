"""Bidirectional segmentation <-> signed-distance transforms.

``t_s2r`` turns a probability volume into a signed distance map in [-1, 1]
(negative inside the object) through a differentiable, convolution-based
approximate distance transform. ``t_r2s`` maps a signed map back to
foreground probabilities. ``exact_edt``/``exact_signed`` are the exact,
non-differentiable counterparts used for label generation and as oracles.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import functional as F
from .errors import (ConfigError, DegenerateField, EvenKernel, NoSource,
                     NonPositiveBandwidth, ShapeMismatch)
from .tensor import Tensor, as_tensor, clamp, concat, log, relu, select, sigmoid


@dataclass(frozen=True)
class Kernel:
    extent: int
    bandwidth: float
    weights: np.ndarray = field(repr=False)


def make_kernel(k_size, h):
    """Radial kernel ``exp(-|offset| / h)`` on a centred ``k_size``^3 grid."""
    if k_size < 3 or k_size % 2 == 0:
        raise EvenKernel(f"k_size must be odd and >= 3, got {k_size}")
    if not h > 0:
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {h}")
    r = k_size // 2
    g = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1].astype(np.float64)
    weights = np.exp(-np.sqrt((g ** 2).sum(axis=0)) / h)
    weights.setflags(write=False)
    return Kernel(k_size, float(h), weights)


@dataclass
class TransformConfig:
    k_size: int = 3
    h: float = 0.15
    n_iters: int | None = None  # None: enough iterations to cross the volume
    sigmoid_steepness: float = 1500.0
    down_rate: float = 0.5
    source_epsilon: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.k_size < 3 or self.k_size % 2 == 0:
            raise ConfigError(f"k_size must be odd and >= 3, got {self.k_size}")
        if not self.h > 0:
            raise ConfigError(f"h must be positive, got {self.h}")
        if not self.sigmoid_steepness > 0:
            raise ConfigError("sigmoid_steepness must be positive")
        if not 0 < self.down_rate <= 0.5:
            raise ConfigError(f"down_rate must lie in (0, 0.5], got {self.down_rate}")
        if self.n_iters is not None and self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if not 0 < self.source_epsilon < 1:
            raise ConfigError("source_epsilon must lie in (0, 1)")

    def iterations(self, spatial):
        if self.n_iters is not None:
            return self.n_iters
        return math.ceil(max(spatial) / (self.k_size // 2))

    def to_dict(self):
        return asdict(self)


@dataclass
class SignedDistanceParts:
    s_in: Tensor
    s_out: Tensor


def _as5(x):
    """View a rank-3 volume as [1, 1, D, H, W]; returns (tensor, restore_fn)."""
    x = as_tensor(x)
    if x.ndim == 5:
        return x, lambda t: t
    if x.ndim == 3:
        return x.reshape((1, 1) + x.shape), lambda t: t.reshape(t.shape[2:])
    raise ShapeMismatch(f"expected a 3-D volume or [B,1,D,H,W], got {x.shape}")


def approx_dt(source, cfg=None, on_empty="raise"):
    """Differentiable distance from every voxel to the nearest soft source.

    Values above ``cfg.source_epsilon`` are sources with weight
    ``min(value, 1)``; a source of weight ``p`` starts at distance ``-h*log(p)``.
    The first pass reaches every voxel whose window contains a source; each
    later pass extends the field by one band of half the kernel extent,
    propagating from the previous band only. Negative soft-min values (voxels
    deep inside a source blob) clamp to zero.

    ``on_empty="zeros"`` returns an all-zero field for samples without any
    source instead of raising :class:`NoSource`.
    """
    cfg = cfg or TransformConfig()
    x, restore = _as5(source)
    if x.shape[1] != 1:
        raise ShapeMismatch(f"approx_dt expects one channel, got {x.shape}")
    eps, h, k = cfg.source_epsilon, cfg.h, cfg.k_size
    src = x.data > eps
    empty = ~src.reshape(len(src), -1).any(axis=1)
    if empty.any() and on_empty == "raise":
        raise NoSource("no voxel exceeds source_epsilon")

    weight = select(src, clamp(x, hi=1.0), 1.0)
    seed = -h * log(weight)
    s, reach = F.softmin_propagate(seed, src, h, k)
    out = select(reach, relu(s), 0.0)
    assigned = reach
    band = reach
    n = cfg.iterations(x.shape[2:])
    for _ in range(1, n):
        s, reach = F.softmin_propagate(out, band, h, k)
        new = reach & ~assigned
        if not new.any():
            break
        out = select(new, s, out)
        assigned = assigned | new
        band = new
    if not assigned[~empty].all():
        # iteration budget exhausted: unreached voxels sit beyond the last band
        out = select(assigned | empty[:, None, None, None, None], out,
                     float(n * (k // 2)))
    return restore(out)


def normalize_field(s, degenerate="zeros"):
    """Min-max normalize a whole tensor to [0, 1]; max == min gives zeros."""
    lo, hi = s.min(), s.max()
    if hi.data == lo.data:
        if degenerate == "raise":
            raise DegenerateField("field is constant; min-max normalization undefined")
        return Tensor(np.zeros(s.shape, dtype=s.dtype))
    return (s - lo) / (hi - lo)


def signed_parts(prob, cfg=None):
    """Distance-to-foreground and distance-to-background fields of ``prob``."""
    cfg = cfg or TransformConfig()
    x, restore = _as5(prob)
    s_in = approx_dt(x, cfg, on_empty="zeros")
    s_out = approx_dt(1.0 - x, cfg, on_empty="zeros")
    return SignedDistanceParts(restore(s_in), restore(s_out))


def combine_signed(s_in, s_out):
    """Per-sample ``norm(s_in) - norm(s_out)`` for [B,1,D,H,W] fields."""
    rows = [normalize_field(s_in[b:b + 1]) - normalize_field(s_out[b:b + 1])
            for b in range(s_in.shape[0])]
    return rows[0] if len(rows) == 1 else concat(rows, axis=0)


def t_s2r(prob, cfg=None, rate=None):
    """Probability map -> signed distance map in [-1, 1], differentiable.

    With ``rate`` < 1 the map is trilinearly downsampled first and the
    result resampled back to the input shape.
    """
    cfg = cfg or TransformConfig()
    x, restore = _as5(prob)
    if rate is not None and rate != 1:
        small = resample(x, rate)
        return restore(resample_back(t_s2r(small, cfg), x.shape[2:]))
    parts = signed_parts(x, cfg)
    return restore(combine_signed(parts.s_in, parts.s_out))


def t_r2s(reg, steepness=1500.0):
    """Signed map -> foreground probability, ``sigmoid(-k * R)``.

    Negative (interior) distances map above 0.5.
    """
    if isinstance(steepness, TransformConfig):
        steepness = steepness.sigmoid_steepness
    if not steepness > 0:
        raise ConfigError("steepness must be positive")
    return sigmoid(as_tensor(reg) * -float(steepness))


# -- exact transforms -------------------------------------------------------------
@numba.njit(cache=True)
def _envelope_1d(f, out, v, z):
    """Lower envelope of parabolas: squared distance transform of one row."""
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        if f[q] == np.inf:
            continue
        if f[v[0]] == np.inf:
            # no parabola yet: q becomes the first one
            v[0] = q
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if f[v[0]] == np.inf:
        for q in range(n):
            out[q] = np.inf
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]


@numba.njit(cache=True)
def _edt_axis(a, axis):
    """Apply the 1-D transform along ``axis`` of a 3-D squared-distance array."""
    d0, d1, d2 = a.shape
    n = a.shape[axis]
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    res = np.empty_like(a)
    if axis == 0:
        for j in range(d1):
            for k in range(d2):
                for i in range(n):
                    f[i] = a[i, j, k]
                _envelope_1d(f, out, v, z)
                for i in range(n):
                    res[i, j, k] = out[i]
    elif axis == 1:
        for i in range(d0):
            for k in range(d2):
                for j in range(n):
                    f[j] = a[i, j, k]
                _envelope_1d(f, out, v, z)
                for j in range(n):
                    res[i, j, k] = out[j]
    else:
        for i in range(d0):
            for j in range(d1):
                for k in range(n):
                    f[k] = a[i, j, k]
                _envelope_1d(f, out, v, z)
                for k in range(n):
                    res[i, j, k] = out[k]
    return res


def _binary(mask):
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be strictly binary")
        m = m.astype(bool)
    return m


def exact_edt(mask):
    """Exact Euclidean distance from each voxel to the nearest foreground voxel.

    Separable squared-distance lower envelopes along each axis. Accepts a
    3-D mask or a [B,1,D,H,W] stack; returns float64 numpy data.
    """
    m = _binary(mask)
    if m.ndim == 5:
        return np.stack([exact_edt(m[b, 0])[None] for b in range(m.shape[0])])
    if m.ndim != 3:
        raise ShapeMismatch(f"exact_edt expects a 3-D mask, got {m.shape}")
    if not m.any():
        raise NoSource("mask has no foreground voxel")
    sq = np.where(m, 0.0, np.inf)
    for axis in range(3):
        sq = _edt_axis(sq, axis)
    return np.sqrt(sq)


def _norm_np(s):
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def exact_signed(mask):
    """Exact signed distance map in [-1, 1], negative inside the object.

    All-foreground or all-background inputs give an all-zero map.
    """
    m = _binary(mask)
    if m.ndim == 5:
        return np.stack([exact_signed(m[b, 0])[None] for b in range(m.shape[0])])
    s_in = exact_edt(m) if m.any() else np.zeros(m.shape)
    s_out = exact_edt(~m) if not m.all() else np.zeros(m.shape)
    return _norm_np(s_in) - _norm_np(s_out)


# -- resampling ---------------------------------------------------------------------
def down_shape(spatial, rate):
    return tuple(max(1, int(math.floor(d * rate))) for d in spatial)


def resample(vol, rate):
    """Trilinear downsampling by ``rate`` in (0, 1]; ``rate == 1`` is the identity."""
    if not 0 < rate <= 1:
        raise ShapeMismatch(f"rate must lie in (0, 1], got {rate}")
    x, restore = _as5(vol)
    if rate == 1:
        return restore(x)
    return restore(F.resize_trilinear(x, down_shape(x.shape[2:], rate)))


def resample_back(vol, target_shape):
    """Trilinear resampling to an explicit spatial ``target_shape``."""
    x, restore = _as5(vol)
    target_shape = tuple(target_shape)[-3:]
    out = F.resize_trilinear(x, target_shape)
    return out.reshape(out.shape[2:]) if as_tensor(vol).ndim == 3 else out
