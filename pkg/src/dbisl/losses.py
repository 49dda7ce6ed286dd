"""Supervision, consistency and pseudo-supervision losses.

Every term is a plain function of tensors so it can be ablated or checked on
its own. Transformer outputs may be passed in precomputed (``s2r``) to avoid
running the distance transform twice per branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dtrans import TransformConfig, t_r2s, t_s2r
from .errors import ConfigError, ShapeMismatch
from .net import BRANCHES
from .tensor import Tensor, as_tensor, clamp, detach, log, mse, select

PROB_CLAMP = 1e-7
DEFAULT_RAMP = 800
DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    lambda_: float = 0.5
    beta_max: float = 0.1
    ramp_len: int | None = None  # None: 40% of the run (engine) or DEFAULT_RAMP
    dice_weight: float = 0.5
    ce_weight: float = 0.5
    harden_pseudo: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lambda_ < 0 or self.beta_max < 0:
            raise ConfigError("lambda and beta_max must be >= 0")
        if self.ramp_len is not None and self.ramp_len < 0:
            raise ConfigError("ramp_len must be >= 0")
        if self.dice_weight < 0 or self.ce_weight < 0 or \
                not math.isclose(self.dice_weight + self.ce_weight, 1.0):
            raise ConfigError("dice_weight and ce_weight must be a convex pair")

    def beta(self, t):
        """Gaussian ramp-up from ``beta_max * e^-5`` to ``beta_max``."""
        ramp = DEFAULT_RAMP if self.ramp_len is None else self.ramp_len
        if ramp == 0:
            return self.beta_max
        frac = min(t / ramp, 1.0)
        return self.beta_max * math.exp(-5.0 * (1.0 - frac) ** 2)

    def to_dict(self):
        return asdict(self)


TERMS = ("sup_it", "sup_ct", "con_it", "con_ct", "pse")


@dataclass
class LossReport:
    sup_it: float = 0.0
    sup_ct: float = 0.0
    con_it: float = 0.0
    con_ct: float = 0.0
    pse: float = 0.0
    total: float = 0.0
    beta: float = 0.0
    lambda_: float = 0.5
    mask_fraction: float = float("nan")
    parts: dict = field(default_factory=dict)

    def recomputed_total(self):
        return self.lambda_ * (self.sup_it + self.sup_ct + self.con_it + self.con_ct) \
            + self.beta * self.pse

    def row(self):
        base = {k: getattr(self, k) for k in TERMS + ("total", "beta", "mask_fraction")}
        base.update(self.parts)
        return base


# -- elementary losses ----------------------------------------------------------
def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def bce_map(pred, target):
    """Voxelwise binary cross-entropy against a (possibly soft) target."""
    target = as_tensor(target, like=pred)
    _check_same(pred, target)
    p = clamp(pred, PROB_CLAMP, 1 - PROB_CLAMP)
    return -(target * log(p) + (1.0 - target) * log(1.0 - p))


def soft_dice_loss(pred, target):
    target = as_tensor(target, like=pred)
    _check_same(pred, target)
    inter = (pred * target).sum()
    denom = pred.sum() + target.sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def seg_loss(pred, target, weights=None):
    """``dice_weight * (1 - soft Dice) + ce_weight * BCE``."""
    weights = weights or LossWeights()
    target = as_tensor(target, like=pred)
    dice = soft_dice_loss(pred, target)
    ce = bce_map(pred, target).mean()
    return weights.dice_weight * dice + weights.ce_weight * ce


# -- supervised terms ---------------------------------------------------------------
def sup_intra(out, y, r=None, weights=None):
    """Sum over both branches of seg loss vs ``y`` and MSE vs signed map ``r``.

    ``r=None`` drops the regression half (regression task disabled).
    """
    total = None
    for br in BRANCHES:
        term = seg_loss(out.seg(br), y, weights)
        if r is not None:
            term = term + mse(out.reg(br), as_tensor(r, like=out.reg(br)))
        total = term if total is None else total + term
    return total


def branch_s2r(out, cfg, rate=None):
    """``t_s2r`` of each branch's probability map, keyed by branch name."""
    return {br: t_s2r(out.seg(br), cfg, rate=rate) for br in BRANCHES}


def sup_cross(out, y, r, cfg=None, rate=None, s2r=None, weights=None):
    """Cross-task supervision: T_s2r(Y_hat) vs R and T_r2s(R_hat) vs Y."""
    cfg = cfg or TransformConfig()
    s2r = s2r or branch_s2r(out, cfg, rate)
    total = None
    for br in BRANCHES:
        term = mse(s2r[br], as_tensor(r, like=s2r[br])) + \
            seg_loss(t_r2s(out.reg(br), cfg.sigmoid_steepness), y, weights)
        total = term if total is None else total + term
    return total


# -- consistency ------------------------------------------------------------------
def con_intra(out, reg=True):
    loss = mse(out.y_phi, out.y_psi)
    if reg:
        loss = loss + mse(out.r_phi, out.r_psi)
    return loss


def con_cross(out, cfg=None, rate=None, s2r=None):
    """Cross-task consistency through both transformers, no stop-gradient."""
    cfg = cfg or TransformConfig()
    s2r = s2r or branch_s2r(out, cfg, rate)
    total = None
    for br in BRANCHES:
        term = mse(s2r[br], out.reg(br)) + \
            mse(t_r2s(out.reg(br), cfg.sigmoid_steepness), out.seg(br))
        total = term if total is None else total + term
    return total


# -- pseudo supervision -------------------------------------------------------------
def pseudo_label(out, harden=False):
    """Detached average of the two segmentation branches."""
    ybar = 0.5 * (out.y_phi.data + out.y_psi.data)
    if harden:
        ybar = (ybar >= 0.5).astype(ybar.dtype)
    return detach(Tensor(ybar))


def seg_vote(p):
    return np.asarray(p.data if isinstance(p, Tensor) else p) >= 0.5


def reg_vote(r):
    """Foreground where the signed map is strictly negative; exact zero is background."""
    return np.asarray(r.data if isinstance(r, Tensor) else r) < 0


def confidence_mask(out, reg=True):
    """True where every head votes the same class (unanimous consent)."""
    votes = [seg_vote(out.y_phi), seg_vote(out.y_psi)]
    if reg:
        votes += [reg_vote(out.r_phi), reg_vote(out.r_psi)]
    first = votes[0]
    m = np.ones(first.shape, dtype=bool)
    for v in votes[1:]:
        m &= v == first
    return m


def pse_loss(out, ybar, m):
    """Masked BCE of both branches against the pseudo label.

    Normalized by ``max(sum(m), 1)`` so an empty mask gives exactly 0.
    """
    m = np.asarray(m, dtype=bool)
    ce = bce_map(out.y_phi, ybar) + bce_map(out.y_psi, ybar)
    masked = select(m, ce, 0.0)
    return masked.sum() / float(max(int(m.sum()), 1))


def total_loss(parts, weights=None, t=0):
    """``lambda * (sup + con) + beta(t) * pse`` from a dict of term tensors."""
    weights = weights or LossWeights()
    lam = weights.lambda_
    beta = weights.beta(t)
    inner = None
    for name in ("sup_it", "sup_ct", "con_it", "con_ct"):
        term = parts.get(name)
        if term is None:
            continue
        inner = term if inner is None else inner + term
    total = None
    if inner is not None:
        total = inner * lam
    pse = parts.get("pse")
    if pse is not None and beta > 0:
        total = pse * beta if total is None else total + pse * beta
    if total is None:
        raise ValueError("no loss term enabled")
    return total
