import itertools

import numpy as np
import pytest

from dbisl.errors import EmptyMask, ShapeMismatch
from dbisl.metrics import (dice_precision_recall, dilate6, evaluate_case, reference_cases,
                           summarize, surface, surface_distances)


def ball(n, r, c):
    g = np.indices((n, n, n))
    return ((g - np.asarray(c, float)[:, None, None, None]) ** 2).sum(0) <= r * r


def brute_surface(m):
    out = np.zeros_like(m)
    for idx in zip(*np.nonzero(m)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            nb = list(idx)
            nb[axis] += step
            if not 0 <= nb[axis] < m.shape[axis] or not m[tuple(nb)]:
                out[idx] = True
                break
    return out


def brute_distances(a, b):
    """Pooled nearest-surface distances by all-pairs search."""
    pa = np.argwhere(brute_surface(a)).astype(float)
    pb = np.argwhere(brute_surface(b)).astype(float)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return np.concatenate([d.min(1), d.min(0)])


def test_overlap_scores_by_counting():
    rng = np.random.default_rng(0)
    p, g = rng.random((6, 6, 6)) > 0.5, rng.random((6, 6, 6)) > 0.5
    tp = fp = fn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    d, pr, rc = dice_precision_recall(p, g)
    assert d == pytest.approx(2 * tp / (2 * tp + fp + fn))
    assert pr == pytest.approx(tp / (tp + fp))
    assert rc == pytest.approx(tp / (tp + fn))


def test_overlap_edge_cases():
    z = np.zeros((4, 4, 4), bool)
    o = np.ones((4, 4, 4), bool)
    assert dice_precision_recall(z, z) == (1.0, 1.0, 1.0)
    assert dice_precision_recall(z, o) == (0.0, 0.0, 0.0)
    assert dice_precision_recall(o, o) == (1.0, 1.0, 1.0)
    with pytest.raises(ShapeMismatch):
        dice_precision_recall(z, np.zeros((4, 4, 3)))


def test_surface_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(5):
        m = rng.random((7, 7, 7)) > 0.4
        np.testing.assert_array_equal(surface(m), brute_surface(m))


def test_point_masks_three_apart():
    a = np.zeros((9, 9, 9), bool)
    b = np.zeros((9, 9, 9), bool)
    a[4, 4, 1] = True
    b[4, 4, 4] = True
    assert surface_distances(a, b) == (3.0, 3.0)


def test_identical_masks_zero():
    m = ball(16, 5, (8, 8, 8))
    assert surface_distances(m, m) == (0.0, 0.0)


def test_surface_distance_matches_bruteforce_and_is_symmetric():
    a = ball(16, 4, (7, 8, 8))
    b = ball(16, 5, (8, 8, 9.5))
    d = brute_distances(a, b)
    asd, hd = surface_distances(a, b)
    assert asd == pytest.approx(d.mean(), abs=1e-12)
    assert hd == pytest.approx(np.percentile(d, 95), abs=1e-12)
    assert surface_distances(b, a) == pytest.approx((asd, hd), abs=1e-12)


def test_translation_invariance():
    a = ball(20, 4, (8, 8, 8))
    b = ball(20, 4, (8, 9, 10))
    shifted = [np.roll(m, (1, 2, 1), axis=(0, 1, 2)) for m in (a, b)]
    assert surface_distances(*shifted) == pytest.approx(surface_distances(a, b), abs=1e-12)


def test_empty_mask_surface_undefined():
    z = np.zeros((5, 5, 5), bool)
    m = z.copy()
    m[2, 2, 2] = True
    with pytest.raises(EmptyMask):
        surface_distances(z, m)
    case = evaluate_case(z, m)
    assert case.asd is None and case.hd95 is None and case.dice == 0


def test_summarize_skips_missing():
    m = ball(12, 3, (6, 6, 6))
    cases = [evaluate_case(m, m), evaluate_case(np.zeros_like(m), m)]
    s = summarize(cases)
    assert s["dice"] == 0.5
    assert s["asd"] == 0.0
    assert s["n_cases"] == 2 and s["n_missing_surface"] == 1


def test_dilate6_matches_bruteforce():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = m[0, 0, 0] = True
    brute = m.copy()
    for idx in zip(*np.nonzero(m)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            nb = list(idx)
            nb[axis] += step
            if 0 <= nb[axis] < 5:
                brute[tuple(nb)] = True
    np.testing.assert_array_equal(dilate6(m), brute)


@pytest.mark.parametrize("case", reference_cases(), ids=lambda c: c[0])
def test_reference_cases(case):
    name, pred, gt, expected, tol = case
    got = evaluate_case(pred, gt).to_dict()
    for key, value in expected.items():
        assert got[key] == pytest.approx(value, abs=tol), key


def test_dilated_ball_against_bruteforce():
    name, pred, gt, _, _ = [c for c in reference_cases() if c[0] == "dilated_ball"][0]
    d = brute_distances(pred, gt)
    assert surface_distances(pred, gt)[0] == pytest.approx(d.mean(), abs=1e-12)
