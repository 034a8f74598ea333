import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deal.spline import NONDECREASING, NONINCREASING, LinearSpline


def abs_spline():
    return LinearSpline.from_function(np.abs, 31, 0.0, 3.0, symmetric=True, monotone=NONDECREASING)


def gauss_spline():
    return LinearSpline.from_function(lambda x: np.exp(-x**2), 31, 0.0, 3.0, symmetric=True,
                                      monotone=NONINCREASING)


def test_abs_init_value():
    assert float(abs_spline()(torch.tensor(1.5))) == pytest.approx(1.5, abs=1e-15)


def test_gaussian_init_at_knot():
    assert float(gauss_spline()(torch.tensor(2.0))) == pytest.approx(math.exp(-4.0), rel=1e-12)
    assert math.exp(-4.0) == pytest.approx(0.018316, abs=1e-6)


def test_knot_interpolation_is_exact(rng):
    s = LinearSpline(torch.from_numpy(rng.standard_normal(11)), -2.0, 3.0)
    np.testing.assert_array_equal(s(torch.from_numpy(s.knots)).numpy(), s.values.numpy())


def test_linear_extension_both_sides():
    s = LinearSpline(torch.tensor([0.0, 1.0, 3.0]), 0.0, 2.0)
    assert float(s(torch.tensor(4.0))) == pytest.approx(7.0)
    assert float(s(torch.tensor(-1.0))) == pytest.approx(-1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 1000))
def test_symmetric_evaluation(x, seed):
    vals = torch.from_numpy(np.random.default_rng(seed).standard_normal(9))
    s = LinearSpline(vals, 0.0, 2.0, symmetric=True)
    assert float(s(torch.tensor(-x))) == float(s(torch.tensor(x)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=12))
def test_projection_feasible_and_idempotent(values):
    for mono in (NONDECREASING, NONINCREASING):
        s = LinearSpline(torch.tensor(values, dtype=torch.float64), 0.0, 1.0, monotone=mono)
        p = s.project()
        assert p.is_feasible()
        assert torch.equal(p.project().values, p.values)


def test_projection_leaves_feasible_input():
    s = LinearSpline(torch.tensor([0.0, 1.0, 2.0]), 0.0, 1.0, monotone=NONDECREASING)
    assert torch.equal(s.project().values, s.values)
    free = LinearSpline(torch.tensor([0.0, 2.0, 1.0]), 0.0, 1.0)
    assert torch.equal(free.project().values, free.values)


def _isotonic_brute(v):
    """Nondecreasing vector closest in l2 among a fine grid of candidates (length-3 oracle)."""
    grid = np.linspace(-1, 3, 81)
    best, arg = np.inf, None
    for c in itertools.combinations_with_replacement(grid, 3):
        d = np.sum((np.array(c) - v) ** 2)
        if d < best:
            best, arg = d, np.array(c)
    return arg


def test_projection_on_0_2_1():
    s = LinearSpline(torch.tensor([0.0, 2.0, 1.0]), 0.0, 1.0, monotone=NONDECREASING)
    p = s.project()
    assert p.is_feasible()
    assert torch.equal(p.project().values, p.values)
    # the running max is feasible but not the l2 projection; both are monotone and share the endpoints' order
    iso = _isotonic_brute(np.array([0.0, 2.0, 1.0]))
    np.testing.assert_allclose(iso, [0.0, 1.5, 1.5], atol=1e-12)
    np.testing.assert_allclose(p.values.numpy(), [0.0, 2.0, 2.0])


def test_monotone_evaluation(rng):
    s = LinearSpline(torch.from_numpy(rng.standard_normal(15)), 0.0, 3.0, monotone=NONDECREASING).project()
    x = torch.linspace(0, 5, 400, dtype=torch.float64)
    assert bool((torch.diff(s(x)) >= -1e-15).all())


def test_tv2_examples():
    assert float(LinearSpline(torch.tensor([0.0, 1.0, 2.0, 3.0]), 0.0, 3.0).tv2()) == 0.0
    assert float(LinearSpline(torch.tensor([0.0, 1.0, 0.0]), 0.0, 2.0).tv2()) == pytest.approx(2.0)
    # |x| on symmetric evaluation: one kink at 0 of size 2 * slope
    assert float(abs_spline().tv2()) == pytest.approx(2.0, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=10), st.floats(0.1, 10))
def test_tv2_nonnegative_and_homogeneous(values, c):
    v = torch.tensor(values, dtype=torch.float64)
    s = LinearSpline(v, 0.0, 1.0)
    t = float(s.tv2())
    assert t >= 0.0
    assert float(LinearSpline(c * v, 0.0, 1.0).tv2()) == pytest.approx(c * t, rel=1e-9, abs=1e-9)


def test_tv2_zero_on_affine_vectors(rng):
    for _ in range(20):
        a, b = rng.standard_normal(2) * 10
        v = torch.from_numpy(a + b * np.arange(17.0))
        assert float(LinearSpline(v, -1.0, 5.0).tv2()) == 0.0


def test_grad_slopes_of_abs():
    slope, idx, w = abs_spline().grad(torch.tensor([0.5, -0.5]))
    np.testing.assert_allclose(slope.numpy(), [1.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0)


def test_grad_at_knot_uses_right_segment():
    s = LinearSpline(torch.tensor([0.0, 1.0, 3.0]), 0.0, 2.0)
    slope, idx, _ = s.grad(torch.tensor([1.0, 2.0, 5.0]))
    np.testing.assert_allclose(slope.numpy(), [2.0, 2.0, 2.0])
    assert idx.tolist() == [1, 1, 1]


def test_grad_matches_finite_differences(rng):
    vals = torch.from_numpy(rng.standard_normal(21))
    s = LinearSpline(vals, -2.0, 2.0)
    x = torch.from_numpy(rng.uniform(-3, 3, 1000))
    u = (x - s.knot_min) / s.spacing
    x = x[(u - torch.round(u)).abs() > 1e-3]  # stay away from knots
    slope, idx, w = s.grad(x)
    h = 1e-5
    fd = (s(x + h) - s(x - h)) / (2 * h)
    assert float((fd - slope).abs().max()) <= 1e-6
    recon = w[..., 0] * vals[idx] + w[..., 1] * vals[idx + 1]
    assert float((recon - s(x)).abs().max()) < 1e-12


def test_bank_evaluates_per_channel():
    bank = LinearSpline(torch.tensor([[0.0, 1.0], [0.0, 2.0]]), 0.0, 1.0)
    out = bank(torch.tensor([[0.5, 0.5]]))
    np.testing.assert_allclose(out.numpy(), [[0.5, 1.0]])


def test_invalid_construction():
    with pytest.raises(ValueError):
        LinearSpline(torch.zeros(3), 1.0, 1.0)
    with pytest.raises(ValueError):
        LinearSpline(torch.zeros(3), 0.0, 1.0, monotone="convex")
    with pytest.raises(ValueError):
        LinearSpline(torch.zeros(1), 0.0, 1.0)
