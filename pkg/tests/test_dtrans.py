import itertools
import math

import numpy as np
import pytest

from dbisl.dtrans import (TransformConfig, approx_dt, exact_edt, exact_signed, make_kernel,
                          normalize_field, resample, resample_back, signed_parts, t_r2s, t_s2r)
from dbisl.errors import (ConfigError, DegenerateField, EvenKernel, NoSource,
                          NonPositiveBandwidth, ShapeMismatch)
from dbisl.gradcheck import gradient_check
from dbisl.metrics import dice_precision_recall
from dbisl.tensor import Tensor, no_grad


def brute_edt(mask):
    """All-pairs nearest-foreground distance (independent O(n^2) oracle)."""
    src = np.argwhere(mask).astype(np.float64)
    pts = np.argwhere(np.ones(mask.shape, bool)).astype(np.float64)
    d = np.sqrt(((pts[:, None, :] - src[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return d.reshape(mask.shape)


def spearman(a, b):
    from scipy.stats import spearmanr
    return spearmanr(a.ravel(), b.ravel()).statistic


def ball(n, r, c=None):
    c = np.broadcast_to(np.asarray((n - 1) / 2 if c is None else c, float), (3,))
    g = np.indices((n, n, n))
    return ((g - c[:, None, None, None]) ** 2).sum(0) <= r * r


# -- kernel ---------------------------------------------------------------------------
def test_kernel_values():
    k = make_kernel(3, 0.35)
    assert k.weights[1, 1, 1] == 1.0
    assert k.weights[2, 1, 1] == pytest.approx(0.05743, abs=1e-5)
    assert k.weights[2, 2, 2] < k.weights[2, 2, 1] < k.weights[2, 1, 1]
    assert (k.weights > 0).all() and (k.weights <= 1).all()
    for off in itertools.product(range(-1, 2), repeat=3):
        assert k.weights[tuple(o + 1 for o in off)] == pytest.approx(
            math.exp(-math.sqrt(sum(o * o for o in off)) / 0.35))


def test_kernel_errors():
    with pytest.raises(EvenKernel):
        make_kernel(4, 0.35)
    with pytest.raises(NonPositiveBandwidth):
        make_kernel(3, 0.0)


def test_config_validation_and_iterations():
    assert TransformConfig().iterations((16, 20, 9)) == 20
    assert TransformConfig(k_size=5).iterations((16, 20, 9)) == 10
    with pytest.raises(ConfigError):
        TransformConfig(down_rate=0.75)
    with pytest.raises(ConfigError):
        TransformConfig(k_size=4)


# -- exact transforms -------------------------------------------------------------------
def test_exact_edt_line():
    m = np.zeros((5, 1, 1), bool)
    m[2] = True
    np.testing.assert_array_equal(exact_edt(m)[:, 0, 0], [2, 1, 0, 1, 2])


def test_exact_edt_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.random((8, 8, 8)) < rng.uniform(0.01, 0.2)
        if not m.any():
            m[0, 0, 0] = True
        np.testing.assert_array_equal(exact_edt(m), brute_edt(m))


def test_exact_edt_two_corners():
    m = np.zeros((5, 5, 5), bool)
    m[0, 0, 0] = m[4, 4, 4] = True
    g = np.indices((5, 5, 5))
    expect = np.minimum(np.sqrt((g ** 2).sum(0)), np.sqrt(((g - 4) ** 2).sum(0)))
    np.testing.assert_allclose(exact_edt(m), expect, rtol=0, atol=1e-12)


def test_exact_edt_no_source():
    with pytest.raises(NoSource):
        exact_edt(np.zeros((4, 4, 4), bool))


def test_exact_signed_properties():
    m = ball(16, 5)
    s = exact_signed(m)
    assert s.min() >= -1 and s.max() <= 1
    assert (s[m] < 0).all()
    assert (s[~m] > 0).all()
    axis = s[8, 8, 8:]
    assert (np.diff(axis) >= 0).all()
    assert not exact_signed(np.ones((4, 4, 4), bool)).any()
    assert not exact_signed(np.zeros((4, 4, 4), bool)).any()


# -- approximate transform --------------------------------------------------------------
def test_approx_dt_all_ones_is_zero():
    out = approx_dt(Tensor(np.ones((6, 6, 6))))
    assert not out.data.any()


def test_approx_dt_no_source():
    with pytest.raises(NoSource):
        approx_dt(Tensor(np.zeros((6, 6, 6))))


def test_approx_dt_monotone_along_rays():
    m = np.zeros((9, 9, 9))
    m[4, 4, 4] = 1
    out = approx_dt(Tensor(m)).data
    for direction in itertools.product((-1, 0, 1), repeat=3):
        if direction == (0, 0, 0):
            continue
        vals = [out[4 + k * direction[0], 4 + k * direction[1], 4 + k * direction[2]]
                for k in range(5)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_approx_dt_close_to_exact():
    rng = np.random.default_rng(1)
    cfg = TransformConfig()
    for _ in range(5):
        m = np.zeros((16, 16, 16))
        for p in rng.integers(0, 16, size=(3, 3)):
            m[tuple(p)] = 1
        approx = approx_dt(Tensor(m), cfg).data
        exact = exact_edt(m.astype(bool))
        assert np.abs(approx - exact).mean() <= cfg.k_size / 2
        assert spearman(approx, exact) >= 0.99


def test_approx_dt_zero_at_hard_sources():
    m = ball(12, 3).astype(float)
    out = approx_dt(Tensor(m)).data
    assert np.allclose(out[m > 0], 0.0)


# -- signed maps and converters ----------------------------------------------------------
def test_t_s2r_sign_convention():
    m = ball(24, 7)
    s = t_s2r(Tensor(m.astype(float))).data
    assert (s[m] < 0).all()
    assert (s[~m] > 0).all()
    assert s.min() >= -1 and s.max() <= 1


def test_t_s2r_swap_flips_sign():
    m = ball(16, 5).astype(float)
    s = t_s2r(Tensor(m)).data
    s_swapped = t_s2r(Tensor(1 - m)).data
    np.testing.assert_array_equal(np.sign(s_swapped), -np.sign(s))


def test_t_s2r_degenerate_patches_are_zero():
    assert not t_s2r(Tensor(np.ones((8, 8, 8)))).data.any()
    assert not t_s2r(Tensor(np.zeros((8, 8, 8)))).data.any()
    assert not t_s2r(Tensor(np.full((8, 8, 8), 0.5))).data.any()


def test_normalize_field_degenerate():
    assert not normalize_field(Tensor(np.full(5, 2.0))).data.any()
    with pytest.raises(DegenerateField):
        normalize_field(Tensor(np.full(5, 2.0)), degenerate="raise")


def test_signed_parts_nonnegative():
    rng = np.random.default_rng(2)
    p = rng.uniform(size=(8, 8, 8))
    parts = signed_parts(Tensor(p))
    assert (parts.s_in.data >= 0).all() and (parts.s_out.data >= 0).all()
    assert parts.s_in.shape == p.shape


def test_batch_normalization_is_per_sample():
    a = ball(12, 3).astype(float)
    b = ball(12, 5).astype(float)
    both = t_s2r(Tensor(np.stack([a, b])[:, None])).data
    np.testing.assert_allclose(both[0, 0], t_s2r(Tensor(a)).data, atol=1e-12)
    np.testing.assert_allclose(both[1, 0], t_s2r(Tensor(b)).data, atol=1e-12)


def test_t_r2s_values():
    assert float(t_r2s(Tensor(np.float64(0.0))).data) == 0.5
    assert float(t_r2s(Tensor(np.float64(-1.0)), 1500).data) == pytest.approx(1.0)
    out = t_r2s(Tensor(np.random.default_rng(3).uniform(-1, 1, 100)), 5.0).data
    assert ((out > 0) & (out < 1)).all()


def test_hard_ball_round_trip():
    m = ball(24, 7)
    with no_grad():
        back = t_r2s(t_s2r(Tensor(m.astype(np.float32)))).data >= 0.5
    assert dice_precision_recall(back, m)[0] >= 0.99


def test_offline_round_trip_exact():
    rng = np.random.default_rng(4)
    for _ in range(3):
        m = ball(20, rng.uniform(3, 7), rng.uniform(7, 12, size=3))
        back = t_r2s(Tensor(exact_signed(m))).data >= 0.5
        assert dice_precision_recall(back, m)[0] == 1.0


# -- resampling ---------------------------------------------------------------------------
def test_resample_identity_and_constants():
    x = np.random.default_rng(5).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    assert resample(Tensor(x), 1).data.tobytes() == x.tobytes()
    c = np.full((1, 1, 10, 10, 10), 0.3)
    small = resample(Tensor(c), 0.5)
    assert small.shape[2:] == (5, 5, 5)
    np.testing.assert_allclose(resample_back(small, (10, 10, 10)).data, 0.3, atol=1e-12)
    assert resample(Tensor(np.ones((1, 1, 3, 3, 3))), 0.2).shape[2:] == (1, 1, 1)
    with pytest.raises(ShapeMismatch):
        resample(Tensor(c), 1.5)


def test_resample_matches_torch_trilinear():
    torch = pytest.importorskip("torch")
    x = np.random.default_rng(6).normal(size=(1, 1, 6, 8, 10))
    ours = resample_back(Tensor(x), (3, 11, 5)).data
    ref = torch.nn.functional.interpolate(torch.from_numpy(x), size=(3, 11, 5),
                                          mode="trilinear", align_corners=False).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_resampled_round_trip_on_balls():
    vals = []
    for r in (10, 12, 14):
        m = ball(48, r, 23.6)
        with no_grad():
            s = t_s2r(Tensor(m.astype(np.float32)), rate=0.5)
            back = t_r2s(s).data >= 0.5
        vals.append(dice_precision_recall(back, m)[0])
    assert np.mean(vals) >= 0.93


# -- gradients ------------------------------------------------------------------------------
def test_transform_gradients():
    rng = np.random.default_rng(7)
    w = Tensor(rng.uniform(0.5, 1.5, size=(1, 1, 5, 5, 5)))
    p = rng.uniform(0.05, 0.95, size=(1, 1, 5, 5, 5))
    res = gradient_check(lambda x: (t_s2r(x) * w).sum(), p, eps=1e-5)
    assert res.checked > 0 and res.max_rel_error < 1e-4
    res = gradient_check(lambda x: (t_r2s(x, 10.0) * w).sum(),
                         rng.uniform(-1, 1, size=(1, 1, 5, 5, 5)), eps=1e-6)
    assert res.max_rel_error < 1e-4


def test_approx_dt_gradient_reaches_sources():
    m = np.full((1, 1, 7, 7, 7), 1e-3)
    m[0, 0, 3, 3, 3] = 0.8
    x = Tensor(m, requires_grad=True)
    from dbisl.tensor import backward
    backward(approx_dt(x).sum())
    assert abs(x.grad[0, 0, 3, 3, 3]) > 0
