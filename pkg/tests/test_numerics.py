import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from speccache.numerics import (MAX_ORDER, as_tensor, binomial, make_rng, norm, pca_2d,
                                pearson_r, spawn_rngs)

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("i,j,want", [(0, 0, 1), (5, 2, 10), (7, 3, 35)])
def test_binomial_examples(i, j, want):
    assert binomial(i, j) == want


def test_binomial_order_cap():
    assert binomial(MAX_ORDER, 6) == 924
    with pytest.raises(ValueError, match="order overflow"):
        binomial(MAX_ORDER + 1, 0)
    with pytest.raises(ValueError):
        binomial(3, 4)


@given(st.integers(0, MAX_ORDER), st.data())
def test_binomial_symmetry(i, data):
    j = data.draw(st.integers(0, i))
    assert binomial(i, j) == binomial(i, i - j)


def test_norm_examples():
    assert norm(np.array([3.0, 4.0]), "l2") == 5.0
    for kind in ("l1", "l2", "linf"):
        assert norm(np.zeros(4), kind) == 0.0
    assert norm(np.array([-2.0, 1.0]), "linf") == 2.0
    assert norm(np.array([-2.0, 1.0]), "l1") == 3.0


def test_norm_errors():
    with pytest.raises(ValueError):
        norm(np.array([]))
    with pytest.raises(ValueError):
        norm(np.ones(2), "l3")


@given(arrays(np.float64, st.integers(1, 12), elements=finite),
       st.floats(-100, 100, allow_nan=False), st.sampled_from(["l1", "l2", "linf"]))
def test_norm_homogeneity(v, c, kind):
    lhs = norm(c * v, kind)
    rhs = abs(c) * norm(v, kind)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


def test_l2_norm_extreme_scales():
    assert norm(np.array([4.494075533883648e-224])) == 4.494075533883648e-224
    assert norm(np.array([3e200, 4e200])) == pytest.approx(5e200, rel=1e-15)
    assert norm(np.zeros(3)) == 0.0


def test_pearson_examples():
    xs = [1.0, 2.0, 5.0, 3.0]
    assert pearson_r(xs, xs) == pytest.approx(1.0)
    assert pearson_r(xs, [-x for x in xs]) == pytest.approx(-1.0)
    # by hand: dx = (-1, 0, 1), dy = (-7/3, -1/3, 8/3); sxy = 5, sxx = 2, syy = 114/9
    assert pearson_r([1, 2, 3], [2, 4, 7]) == pytest.approx(5 / math.sqrt(2 * 114 / 9), rel=1e-14)


def test_pearson_errors():
    with pytest.raises(ValueError, match="zero variance"):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_r([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson_r([1, 2, 3], [1, 2])


@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite))
def test_pearson_bounded(xs, ys):
    try:
        r = pearson_r(xs, ys)
    except ValueError:
        return
    assert -1.0 <= r <= 1.0


def test_pca_axis_aligned_is_identity_map():
    pts = np.array([[3, 0], [-3, 0], [6, 0], [-6, 0], [0, 1], [0, -1]], dtype=float)
    proj = pca_2d(pts)
    np.testing.assert_allclose(proj, pts - pts.mean(0), atol=1e-12)


def test_pca_collinear_is_degenerate():
    pts = [np.array([1.0, 2.0, 3.0]) * s for s in (0.0, 1.0, 2.5, -1.0)]
    with pytest.raises(ValueError, match="degenerate spectrum"):
        pca_2d(pts)


@pytest.mark.parametrize("n", [40, 3])       # covariance route and Gram route
def test_pca_matches_svd(n):
    X = make_rng(n).standard_normal((n, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2])
    proj = pca_2d(X)
    Xc = X - X.mean(0)
    U, S, _ = np.linalg.svd(Xc, full_matrices=False)
    var = proj.var(axis=0, ddof=1)
    np.testing.assert_allclose(var, S[:2] ** 2 / (n - 1), rtol=1e-9)
    assert var[0] >= var[1]
    np.testing.assert_allclose(np.abs(proj), np.abs(U[:, :2] * S[:2]), atol=1e-9)


@given(arrays(np.float64, (6, 2), elements=st.floats(-10, 10, allow_nan=False)))
def test_pca_preserves_distances_in_2d(pts):
    try:
        proj = pca_2d(pts)
    except ValueError:
        return
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9 * max(1.0, d_in.max()))


def test_rng_reproducible():
    a = make_rng(42).standard_normal(10_000)
    b = make_rng(42).standard_normal(10_000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).standard_normal(10_000))
    with pytest.raises(ValueError):
        make_rng(-1)


def test_spawned_streams_are_stable_and_distinct():
    a = [r.random() for r in spawn_rngs(5, 4)]
    b = [r.random() for r in spawn_rngs(5, 4)]
    assert a == b
    assert len(set(a)) == 4


def test_as_tensor_rejects_non_finite():
    assert as_tensor([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        as_tensor([1.0, float("nan")])
