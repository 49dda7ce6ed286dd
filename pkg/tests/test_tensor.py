import math

import numpy as np
import pytest

from dbisl import functional as F
from dbisl.dtrans import make_kernel
from dbisl.errors import (DoubleBackwardUnsupported, EmptyTensor, EvenKernel, NonFiniteResult,
                          NotScalar, ShapeMismatch)
from dbisl.gradcheck import finite_diff_check, gradient_check
from dbisl.tensor import (Tape, Tensor, backward, clamp, concat, detach, mse, no_grad,
                          precision, reduce, select, stack)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def test_sigmoid_zero_and_derivative():
    x = leaf(0.0)
    y = x.sigmoid()
    assert float(y.data) == 0.5
    backward(y)
    assert float(x.grad) == pytest.approx(0.25)


def test_log_exp_inverse():
    x = np.random.default_rng(0).uniform(-3, 3, size=(4, 5))
    np.testing.assert_allclose(Tensor(x).exp().log().data, x, atol=1e-12)


def test_log_of_nonpositive_raises():
    with pytest.raises(NonFiniteResult):
        Tensor(np.array([1.0, 0.0])).log()


def test_div_by_zero_raises():
    with pytest.raises(NonFiniteResult):
        Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))


def test_broadcast_only_identical_or_scalar():
    a = Tensor(np.ones((2, 3)))
    assert (a + 2.0).shape == (2, 3)
    assert (a * Tensor(np.float64(3.0))).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        a + Tensor(np.ones(3))


def test_rank_limit():
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros((1,) * 6))


def test_max_gradient_and_tie_rule():
    x = leaf([-1.0, 0.0, 2.0])
    m = x.max()
    assert float(m.data) == 2
    backward(m)
    np.testing.assert_array_equal(x.grad, [0, 0, 1])

    c = leaf(np.full((2, 2), 3.0))
    backward(c.min())
    assert c.grad.reshape(-1).tolist() == [1, 0, 0, 0]


def test_mean_matches_scalar_accumulation():
    x = np.random.default_rng(1).normal(size=(4, 4, 4))
    acc = 0.0
    for v in x.reshape(-1):
        acc += float(v)
    assert float(Tensor(x).mean().data) == pytest.approx(acc / 64, rel=1e-12)


def test_reduce_empty_raises():
    with pytest.raises(EmptyTensor):
        reduce("sum", Tensor(np.zeros((0,))))


def test_select_routes_gradient():
    rng = np.random.default_rng(2)
    mask = rng.random((3, 3, 3)) > 0.5
    a, b = leaf(rng.normal(size=(3, 3, 3))), leaf(rng.normal(size=(3, 3, 3)))
    backward(select(mask, a, b).sum())
    expect_a = np.zeros((3, 3, 3))
    expect_b = np.zeros((3, 3, 3))
    for idx in np.ndindex(3, 3, 3):
        if mask[idx]:
            expect_a[idx] = 1
        else:
            expect_b[idx] = 1
    np.testing.assert_array_equal(a.grad, expect_a)
    np.testing.assert_array_equal(b.grad, expect_b)


def test_select_all_true_all_false():
    a, b = leaf(np.ones(4)), leaf(np.zeros(4))
    out = select(np.ones(4, bool), a, b)
    backward(out.sum())
    np.testing.assert_array_equal(out.data, a.data)
    assert not b.grad.any()
    np.testing.assert_array_equal(select(np.zeros(4, bool), a.detach(), b.detach()).data, b.data)


def test_select_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        select(np.ones(3, bool), Tensor(np.ones(4)), Tensor(np.ones(4)))


def test_detach_contract():
    y = leaf(np.arange(4.0))
    d = detach(y)
    assert not d.requires_grad
    assert np.array_equal(d.data, y.data)
    x = leaf(np.ones(4))
    backward(mse(x, d))
    assert y.grad is None


def test_backward_basics():
    x = leaf(np.random.default_rng(3).normal(size=(2, 2, 2)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 2, 2)))
    x2 = leaf(x.data)
    backward((x2 * x2).sum())
    np.testing.assert_allclose(x2.grad, 2 * x2.data)


def test_fan_out_accumulates():
    x = leaf([1.0, 2.0])
    backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_backward_errors():
    x = leaf(np.ones(3))
    with pytest.raises(NotScalar):
        backward(x * 2.0)
    loss = (x * 2.0).sum()
    backward(loss)
    with pytest.raises(DoubleBackwardUnsupported):
        backward(loss)


def test_tape_topological():
    x = leaf(np.ones(3))
    y = (x.exp() * x).sum() + x.sum()
    tape = Tape.from_root(y)
    assert tape.is_topological()


def test_no_grad_builds_no_edges():
    x = leaf(np.ones(2))
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_stack_concat_backward():
    a, b = leaf(np.ones(3)), leaf(np.ones(3))
    backward((stack([a, b]) * Tensor(np.array([[1.0] * 3, [2.0] * 3]))).sum())
    np.testing.assert_array_equal(b.grad, [2, 2, 2])
    c, d = leaf(np.ones(2)), leaf(np.ones(3))
    backward((concat([c, d]) * 3.0).sum())
    np.testing.assert_array_equal(d.grad, [3, 3, 3])


# -- fixed convolution ----------------------------------------------------------------
def naive_correlation(x, k):
    """Triple-loop correlation with replicate border (independent oracle)."""
    d, h, w = x.shape
    r = k.shape[0] // 2
    out = np.zeros_like(x)
    for i in range(d):
        for j in range(h):
            for l in range(w):
                s = 0.0
                for a in range(-r, r + 1):
                    for b in range(-r, r + 1):
                        for c in range(-r, r + 1):
                            ii = min(max(i + a, 0), d - 1)
                            jj = min(max(j + b, 0), h - 1)
                            ll = min(max(l + c, 0), w - 1)
                            s += k[a + r, b + r, c + r] * x[ii, jj, ll]
                out[i, j, l] = s
    return out


def test_conv3d_fixed_zero_and_impulse():
    k = make_kernel(3, 0.35)
    z = F.conv3d_fixed(Tensor(np.zeros((1, 1, 5, 5, 5))), k)
    assert not z.data.any()
    x = np.zeros((1, 1, 5, 5, 5))
    x[0, 0, 2, 2, 2] = 1
    out = F.conv3d_fixed(Tensor(x), np.ones((3, 3, 3)))
    expect = np.zeros((5, 5, 5))
    expect[1:4, 1:4, 1:4] = 1
    np.testing.assert_array_equal(out.data[0, 0], expect)


def test_conv3d_fixed_matches_bruteforce():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 6, 6))
    k = rng.uniform(size=(3, 3, 3))
    out = F.conv3d_fixed(Tensor(x[None, None]), k).data[0, 0]
    np.testing.assert_allclose(out, naive_correlation(x, k), rtol=1e-12, atol=1e-12)


def test_conv3d_fixed_errors():
    with pytest.raises(EvenKernel):
        F.conv3d_fixed(Tensor(np.zeros((1, 1, 4, 4, 4))), np.ones((2, 2, 2)))
    with pytest.raises(ShapeMismatch):
        F.conv3d_fixed(Tensor(np.zeros((1, 2, 4, 4, 4))), np.ones((3, 3, 3)))


def test_composed_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    k = make_kernel(3, 0.35)
    t = rng.uniform(size=(1, 1, 4, 4, 4))
    res = gradient_check(lambda x: mse(F.conv3d_fixed(x, k).sigmoid(), Tensor(t)),
                         rng.normal(size=(1, 1, 4, 4, 4)), eps=1e-4)
    assert res.checked == 64
    assert res.max_rel_error < 1e-5


# -- gradient-check harness -----------------------------------------------------------
def test_finite_diff_check_sum_exact():
    x = np.random.default_rng(6).normal(size=(3, 3))
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-9


def test_finite_diff_check_mse():
    rng = np.random.default_rng(7)
    x, tgt = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
    assert finite_diff_check(lambda t: mse(t, Tensor(tgt)), x) < 1e-6


def test_gradcheck_excludes_branch_flips():
    # |x| via relu(x) + relu(-x) is not differentiable at 0: that coordinate is skipped
    x = np.array([0.0, 1.0, -2.0])
    res = gradient_check(lambda t: (t.relu() + (-t).relu()).sum(), x, eps=1e-4)
    assert res.skipped_branch == 1
    assert res.max_rel_error < 1e-8


@pytest.mark.parametrize("op", ["exp", "sigmoid", "tanh", "square", "log", "clamp", "div",
                                "relu", "max", "min", "mean"])
def test_every_op_gradient(op):
    rng = np.random.default_rng(8)
    x = rng.uniform(0.2, 2.0, size=(3, 3, 3)) * rng.choice([-1, 1], size=(3, 3, 3))
    if op == "log":
        x = np.abs(x)
    w = Tensor(rng.uniform(0.5, 1.5, size=(3, 3, 3)))
    fns = {
        "exp": lambda t: (t.exp() * w).sum(),
        "sigmoid": lambda t: (t.sigmoid() * w).sum(),
        "tanh": lambda t: (t.tanh() * w).sum(),
        "square": lambda t: (t * t * w).sum(),
        "log": lambda t: (t.log() * w).sum(),
        "clamp": lambda t: (clamp(t, -1.0, 1.0) * w).sum(),
        "div": lambda t: (w / (t * t + 1.0)).sum(),
        "relu": lambda t: (t.relu() * w).sum(),
        "max": lambda t: (t * w).max(),
        "min": lambda t: (t * w).min(),
        "mean": lambda t: (t * w).mean(),
    }
    res = gradient_check(fns[op], x, eps=1e-6)
    assert res.checked > 0
    assert res.max_rel_error < 1e-5


def test_precision_switch_and_determinism():
    with precision("f64"):
        assert Tensor([1.0, 2.0]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 1, 6, 6, 6)).astype(np.float32)
    k = make_kernel(3, 0.5)

    def run():
        t = Tensor(x, requires_grad=True)
        loss = (F.conv3d_fixed(t, k).tanh() * 1.5).sum()
        backward(loss)
        return loss.data.tobytes(), t.grad.tobytes()
    assert run() == run()


def test_nonfinite_forward_is_reported():
    with pytest.raises(NonFiniteResult):
        Tensor(np.array([1000.0], dtype=np.float32)).exp()
    assert math.isfinite(float(Tensor(np.array([10.0])).exp().sum().data))
