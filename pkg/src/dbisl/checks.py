"""Finite-difference suites for the transformers and every loss (64-bit).

Each suite is a scalar function of one random input tensor. Regression
outputs are scaled by ``REG_SCALE`` so that ``sigmoid(-k R)`` with k = 1500
is evaluated in its active range rather than fully saturated; the step is
shrunk accordingly. Suites on raw head inputs (unit scale) use a 1e-4 step:
smaller steps let cancellation noise swamp coordinates with tiny gradients.

In the full-objective suite the pseudo label and confidence mask are held
at their values for the unperturbed input, which is what the stop-gradient
means; otherwise the difference quotient would see the target move.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .dtrans import TransformConfig, t_r2s, t_s2r
from .gradcheck import gradient_check
from .net import DualOutput
from .tensor import Tensor, precision

STEEPNESS = 1500.0
REG_SCALE = 3.0 / STEEPNESS
SIZE = 6


@dataclass
class Suite:
    name: str
    fn: object
    x: np.ndarray
    eps: float
    max_coords: int | None = None


def _outputs(x):
    """Four head maps from a [B,4,D,H,W] tensor of raw values."""
    y_phi = x[:, 0:1].sigmoid()
    y_psi = x[:, 1:2].sigmoid()
    r_phi = x[:, 2:3].tanh() * REG_SCALE
    r_psi = x[:, 3:4].tanh() * REG_SCALE
    return DualOutput(y_phi, y_psi, r_phi, r_psi)


def _blob(rng, n):
    g = np.indices((n, n, n)).astype(np.float64)
    c = rng.uniform(1.5, n - 2.5, size=3)
    return (((g - c[:, None, None, None]) ** 2).sum(axis=0) <= 2.5 ** 2).astype(np.float64)


def suites(seed=0, n=SIZE, max_coords=120):
    rng = np.random.default_rng(seed)
    tcfg = TransformConfig(sigmoid_steepness=STEEPNESS)
    y = _blob(rng, n)[None, None]
    r = (y * -0.5 + (1 - y) * 0.5) * REG_SCALE
    prob = rng.uniform(0.05, 0.95, size=(1, 1, n, n, n))
    raw = rng.normal(0, 1.0, size=(2, 4, n, n, n))
    weights = L.LossWeights(ramp_len=10)
    # the pseudo target is a stop-gradient constant: freeze it at the base point
    with precision(np.float64):
        base = _outputs(Tensor(raw))
        ybar_fixed = L.pseudo_label(base)
        m_fixed = L.confidence_mask(base)

    def total(x):
        out = _outputs(x)
        lab = DualOutput(*(t[0:1] for t in out.tensors()))
        s2r = L.branch_s2r(out, tcfg)
        parts = {
            "sup_it": L.sup_intra(lab, y, r, weights),
            "sup_ct": L.sup_cross(lab, y, r, tcfg, s2r={k: v[0:1] for k, v in s2r.items()},
                                  weights=weights),
            "con_it": L.con_intra(out),
            "con_ct": L.con_cross(out, tcfg, s2r=s2r),
        }
        parts["pse"] = L.pse_loss(out, ybar_fixed, m_fixed)
        return L.total_loss(parts, weights, t=5)

    small = 1e-4 / STEEPNESS * 10
    return [
        Suite("t_s2r", lambda x: (t_s2r(x, tcfg) * Tensor(rng_w(x.shape))).sum(), prob, 1e-5,
              max_coords),
        Suite("t_s2r_resample",
              lambda x: (t_s2r(x, tcfg, rate=0.5) * Tensor(rng_w(x.shape))).sum(), prob, 1e-5,
              max_coords),
        Suite("t_r2s", lambda x: (t_r2s(x, STEEPNESS) * Tensor(rng_w(x.shape))).sum(),
              rng.uniform(-1, 1, size=(1, 1, n, n, n)) * REG_SCALE, small, max_coords),
        Suite("seg_loss", lambda x: L.seg_loss(x.sigmoid(), y), rng.normal(0, 1, y.shape),
              1e-5, max_coords),
        Suite("sup_cross", lambda x: L.sup_cross(_outputs(x), y, r, tcfg),
              raw[0:1], 1e-4, max_coords),
        Suite("con_cross", lambda x: L.con_cross(_outputs(x), tcfg), raw, 1e-4, max_coords),
        Suite("total_loss", total, raw, 1e-4, max_coords),
    ]


def rng_w(shape):
    """Fixed positive weights so the checked scalar is not a plain sum."""
    return np.random.default_rng(99).uniform(0.5, 1.5, size=shape)


def run_suites(tol=1e-4, seed=0, max_coords=120, names=None):
    """Returns a list of (name, GradCheckResult, passed)."""
    results = []
    with precision(np.float64):
        for s in suites(seed, max_coords=max_coords):
            if names and s.name not in names:
                continue
            res = gradient_check(s.fn, s.x, eps=s.eps, max_coords=s.max_coords,
                                 rng=np.random.default_rng(seed))
            results.append((s.name, res, res.passed(tol)))
    return results
