"""Overlap and surface-distance metrics for binary volumes (voxel units)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dtrans import exact_edt
from .errors import EmptyMask, ShapeMismatch


@dataclass
class SegMetrics:
    dice: float
    precision: float
    recall: float
    asd: float | None = None
    hd95: float | None = None

    def to_dict(self):
        return asdict(self)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_precision_recall(pred, gt):
    """Confusion-matrix overlap scores; two empty masks score 1 everywhere."""
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return dice, precision, recall


def surface(mask):
    """Foreground voxels with at least one 6-connected background neighbour.

    Voxels on the volume faces count as surface (outside is background).
    """
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[(slice(1, -1),) * m.ndim]
    return m & ~interior


def surface_distances(pred, gt):
    """Pooled symmetric (ASD, HD95) between the two surfaces.

    HD95 is the linearly interpolated 95th percentile of the pooled
    point-to-surface distances.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMask("surface distance undefined for an empty mask")
    sp, sg = surface(pred), surface(gt)
    d_pg = exact_edt(sg)[sp]
    d_gp = exact_edt(sp)[sg]
    pooled = np.concatenate([d_pg, d_gp])
    return float(pooled.mean()), float(np.percentile(pooled, 95, method="linear"))


def evaluate_case(pred, gt):
    """All metrics for one case; surface metrics are None when undefined."""
    dice, precision, recall = dice_precision_recall(pred, gt)
    try:
        asd, hd95 = surface_distances(pred, gt)
    except EmptyMask:
        asd = hd95 = None
    return SegMetrics(dice, precision, recall, asd, hd95)


def summarize(cases):
    """Mean of each metric over cases, skipping missing surface values."""
    out = {}
    for key in ("dice", "precision", "recall", "asd", "hd95"):
        vals = [getattr(c, key) for c in cases if getattr(c, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["n_cases"] = len(cases)
    out["n_missing_surface"] = sum(c.asd is None for c in cases)
    return out


def dilate6(mask):
    """One 6-connected dilation step (outside the volume stays background)."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    out = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            out |= np.roll(p, shift, axis=axis)[(slice(1, -1),) * m.ndim]
    return out


def reference_cases():
    """Constructed (name, pred, gt, expected, tol) cases with hand-derived values.

    ``expected`` maps metric names to values; ``tol`` is an absolute tolerance.
    """
    cases = []
    g = np.indices((9, 9, 9))
    ball = ((g - 4) ** 2).sum(0) <= 9
    cases.append(("identical", ball, ball,
                  {"dice": 1.0, "precision": 1.0, "recall": 1.0, "asd": 0.0, "hd95": 0.0}, 0.0))
    other = np.zeros_like(ball)
    other[0, 0, 0] = True
    cases.append(("disjoint", other, ball, {"dice": 0.0, "precision": 0.0, "recall": 0.0}, 0.0))
    half = np.zeros((4, 4, 4), bool)
    half[:2] = True
    cases.append(("half_subset", half, np.ones((4, 4, 4), bool),
                  {"dice": 2 / 3, "precision": 1.0, "recall": 0.5}, 1e-12))
    a = np.zeros((9, 9, 9), bool)
    b = np.zeros((9, 9, 9), bool)
    a[4, 4, 1] = True
    b[4, 4, 4] = True
    cases.append(("points_3_apart", a, b, {"asd": 3.0, "hd95": 3.0}, 0.0))
    cases.append(("dilated_ball", dilate6(ball), ball, {"asd": 1.0}, 0.05))
    empty = np.zeros((4, 4, 4), bool)
    cases.append(("both_empty", empty, empty,
                  {"dice": 1.0, "precision": 1.0, "recall": 1.0}, 0.0))
    return cases
