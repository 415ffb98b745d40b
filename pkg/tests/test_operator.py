import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monohom.operator import (
    check_class_M,
    ellipticity_bounds,
    eval_a,
    eval_Da,
    eval_W,
    radial_monotonicity_bound,
)


def test_eval_a_examples():
    np.testing.assert_array_equal(eval_a(np.eye(2), [1.0, 0.0], 4), [2.0, 0.0])
    np.testing.assert_array_equal(eval_a(np.eye(3), np.zeros(3), 3.3), np.zeros(3))
    np.testing.assert_allclose(eval_a(np.diag([0.5, 1.0]), [2.0, 0.0], 3), [3.0, 0.0])


def test_eval_Da_examples():
    np.testing.assert_array_equal(eval_Da(np.eye(2), np.zeros(2), 4), np.eye(2))
    np.testing.assert_allclose(eval_Da(np.eye(3), [1.0, 0, 0], 4), np.diag([4.0, 2.0, 2.0]))
    # p = 2: linear map 2A, no rank-one term even at zero
    np.testing.assert_array_equal(eval_Da(np.eye(2), np.zeros(2), 2), 2 * np.eye(2))
    # p < 4 at zero: rank-one limit is zero
    np.testing.assert_array_equal(eval_Da(np.eye(2), np.zeros(2), 3), np.eye(2))


def _random_matrix(rng, d):
    M = rng.standard_normal((d, d))
    return M / (1.1 * np.linalg.norm(M, 2))


@pytest.mark.parametrize("seed", range(100))
def test_Da_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    A = _random_matrix(rng, d)
    xi = rng.standard_normal(d) * rng.uniform(0.1, 3)
    h = rng.standard_normal(d)
    p = 3.5
    eps = 1e-6
    fd = (eval_a(A, xi + eps * h, p) - eval_a(A, xi - eps * h, p)) / (2 * eps)
    an = eval_Da(A, xi, p) @ h
    assert np.linalg.norm(fd - an) <= 1e-6 * np.linalg.norm(an)


def test_eval_W_examples():
    assert eval_W(1.0, np.zeros(2), 3.0) == 0.0
    assert eval_W(1.0, np.array([1.0, 0.0]), 2.0) == pytest.approx(1.0)
    assert eval_W(0.5, np.array([2.0, 0.0]), 4.0) == pytest.approx(3.0)


def test_eval_W_rejects_matrix_coefficient():
    with pytest.raises(ValueError):
        eval_W(np.diag([1.0, 0.5]), np.array([1.0, 0.0]), 3.0)


@pytest.mark.parametrize("seed", range(100))
def test_a_is_gradient_of_W(seed):
    rng = np.random.default_rng(1000 + seed)
    d = int(rng.integers(1, 4))
    b = rng.uniform(0.2, 1.0)
    xi = rng.standard_normal(d) * 2
    p = rng.uniform(2, 5)
    eps = 1e-6
    fd = np.array([(eval_W(b, xi + eps * e, p) - eval_W(b, xi - eps * e, p)) / (2 * eps) for e in np.eye(d)])
    a = eval_a(b * np.eye(d), xi, p)
    assert np.linalg.norm(fd - a) <= 1e-6 * np.linalg.norm(a)


def test_a_vanishes_at_zero_on_fields():
    rng = np.random.default_rng(0)
    A = rng.uniform(0.2, 1, size=(2, 2, 5, 5))
    assert not np.any(eval_a(A, np.zeros((2, 5, 5)), 3.0))


@settings(max_examples=100, deadline=None)
@given(
    b=st.floats(0.25, 1.0),
    p=st.floats(2.0, 6.0),
    xi=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    h=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
)
def test_Da_pointwise_ellipticity(b, p, xi, h):
    xi, h = np.array(xi), np.array(h)
    c, C = ellipticity_bounds(0.25, p)
    mu = 1 + np.linalg.norm(xi) ** (p - 2)
    q = h @ eval_Da(b * np.eye(2), xi, p) @ h
    hh = h @ h
    assert c * hh * mu * (1 - 1e-12) <= q <= C * hh * mu * (1 + 1e-12) + 1e-300


def test_class_M_nondegenerate_map_passes_with_radial_bound():
    p = 4.0
    amap = lambda x: (1 + np.linalg.norm(x, axis=0) ** (p - 2)) * x  # noqa: E731
    rep = check_class_M(amap, 2, p, 1.0, 2.0, sample_count=4096)
    assert rep.passed
    c, _ = radial_monotonicity_bound(lambda t: 1 + t ** (p - 2), lambda t: (p - 2) * t ** (p - 3), p)
    # E6-type bound, converted to the (1+|x1|+|x2|)^(p-2) normalisation
    lower = c / (4 * (p - 1)) * 2 ** (-(p - 1) * (p - 2) / p) * 3 ** (-(p - 2))
    assert rep.C_mono >= lower


def test_class_M_linear_map_constants_are_one():
    rep = check_class_M(lambda x: x, 3, 2.0, 1.0, 2.0, sample_count=2000)
    assert rep.passed
    assert rep.C_upper == pytest.approx(1.0, rel=1e-9)
    assert rep.C_mono == pytest.approx(1.0, rel=1e-9)


def test_class_M_degenerate_p_laplacian_fails():
    amap = lambda x: np.linalg.norm(x, axis=0) ** 2 * x  # noqa: E731
    rep = check_class_M(amap, 2, 4.0, 1.0, 2.0, sample_count=2000)
    assert not rep.passed
    assert rep.C_mono < 1e-6
    assert np.linalg.norm(rep.witness_mono[0]) < 1e-3


def test_class_M_requires_enough_samples():
    with pytest.raises(ValueError):
        check_class_M(lambda x: x, 2, 2.0, 1.0, 2.0, sample_count=10)
