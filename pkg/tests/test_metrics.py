import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from margincut.data import IntensityImage, SegmentationMask
from margincut.metrics import (UndefinedSBRError, directed_hausdorff, dsc_2d, dsc_3d, hausdorff,
                               margin_error, match_points, sbr)

import oracles

small_sets = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
                    elements=st.integers(-80, 80).map(lambda k: k / 8))


def test_hausdorff_examples():
    A = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    B = np.array([[0, 0, 0]], dtype=float)
    assert directed_hausdorff(A, A) == 0.0
    assert directed_hausdorff(A, B) == 1.0
    assert directed_hausdorff(B, A) == 0.0
    assert hausdorff(A, B) == hausdorff(B, A) == 1.0
    with pytest.raises(ValueError):
        hausdorff(A, np.empty((0, 3)))


def test_hausdorff_random_300():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(300, 3)), rng.normal(size=(300, 3)) + 0.3
    assert directed_hausdorff(A, B) == pytest.approx(oracles.directed_hausdorff(A, B), rel=1e-12)
    assert hausdorff(A, B) == pytest.approx(oracles.hausdorff(A, B), rel=1e-12)


@given(small_sets, small_sets)
def test_hausdorff_properties(A, B):
    h = hausdorff(A, B)
    assert h == hausdorff(B, A)
    assert h >= directed_hausdorff(A, B) and h >= directed_hausdorff(B, A)
    same = {tuple(p) for p in A} == {tuple(p) for p in B}
    assert (h == 0) == same


def test_sbr_examples():
    img = np.array([[100.0, 100.0], [50.0, 50.0]])
    t = np.array([[1, 1], [0, 0]], bool)
    assert sbr(img, t, ~t) == 2.0
    assert sbr(np.full((2, 2), 3.0), t, ~t) == 1.0
    with pytest.raises(UndefinedSBRError):
        sbr(np.array([[1.0, 0.0]]), np.array([[1, 0]], bool), np.array([[0, 1]], bool))
    with pytest.raises(ValueError):
        sbr(img, t, t)
    with pytest.raises(ValueError):
        sbr(img, t, np.zeros_like(t))


@given(arrays(np.float64, (6, 7), elements=st.floats(1, 1e4)), st.floats(1e-3, 1e3))
def test_sbr_scale_invariance(values, k):
    t = np.zeros((6, 7), bool)
    t[:3] = True
    assert sbr(values * k, t, ~t) == pytest.approx(sbr(values, t, ~t), rel=1e-12)


def test_sbr_ignores_invalid_pixels():
    img = IntensityImage(np.array([[10.0, 1000.0], [5.0, 5.0]]), np.array([[1, 0], [1, 1]], bool))
    t = np.array([[1, 1], [0, 0]], bool)
    assert sbr(img, t, ~t) == 2.0


def test_dsc_2d_examples():
    x = np.zeros((10, 20), bool)
    x[:, :10] = True
    assert dsc_2d(x, x) == 1.0
    assert dsc_2d(x, ~x) == 0.0
    y = np.zeros_like(x)
    y.ravel()[np.flatnonzero(x)[:80]] = True
    y.ravel()[np.flatnonzero(~x)[:20]] = True
    assert dsc_2d(x, y) == pytest.approx(0.8)
    assert dsc_2d(np.zeros_like(x), np.zeros_like(x)) == 1.0
    with pytest.raises(ValueError):
        dsc_2d(x, x[:5])


def test_dsc_2d_per_class_and_weights():
    a = SegmentationMask(np.array([[0, 1, 1, 2]]))
    b = SegmentationMask(np.array([[0, 1, 2, 2]]))
    d = dsc_2d(a, b)
    assert d["per_class"] == {0: 1.0, 1: pytest.approx(2 / 3), 2: pytest.approx(2 / 3)}
    assert d["mean"] == pytest.approx((1 * 1 + 1 * 2 / 3 + 2 * 2 / 3) / 4)


@given(arrays(np.uint8, (5, 6), elements=st.integers(0, 2)),
       arrays(np.uint8, (5, 6), elements=st.integers(0, 2)))
def test_dsc_2d_properties(x, y):
    d = dsc_2d(x, y)
    assert d == dsc_2d(x, y)
    for c, v in d["per_class"].items():
        assert 0 <= v <= 1
        assert v == pytest.approx(oracles.dice_masks(x, y, c))
        assert v == dsc_2d(y, x)["per_class"][c]
    assert dsc_2d(x, x)["mean"] == 1.0


def test_dsc_3d_examples():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 100, size=(150, 3))
    d = rng.normal(size=X.shape)
    jitter = 0.05 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert dsc_3d(X, X + jitter) == 1.0
    assert dsc_3d(X, X + [1.0, 0, 0]) == 0.0
    G = np.arange(30.0).reshape(10, 3)
    assert dsc_3d(G, G + [0.125, 0, 0], threshold=0.125) == 0.0  # strict inequality
    assert dsc_3d(np.empty((0, 3)), np.empty((0, 3))) == 1.0
    with pytest.raises(ValueError):
        dsc_3d(X, X, threshold=0.0)


def test_dsc_3d_close_to_optimal_matching():
    # sampling density comparable to a rendered cloud: few points compete for a partner
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, m = rng.integers(5, 200, size=2)
        X = rng.uniform(0, 4, size=(n, 3))
        Y = np.concatenate([X[: m // 2] + rng.normal(0, 0.04, size=(min(m // 2, n), 3)),
                            rng.uniform(0, 4, size=(m - min(m // 2, n), 3))])
        greedy = len(match_points(X, Y, 0.1))
        assert greedy == oracles.greedy_matches(X, Y, 0.1)
        assert oracles.optimal_matches(X, Y, 0.1) - greedy <= 1


def test_dsc_3d_greedy_matches_oracle_dense():
    rng = np.random.default_rng(4)
    for _ in range(20):
        X = rng.uniform(0, 1.5, size=(rng.integers(1, 80), 3))
        Y = rng.uniform(0, 1.5, size=(rng.integers(1, 80), 3))
        assert len(match_points(X, Y, 0.2)) == oracles.greedy_matches(X, Y, 0.2)


def test_optimal_matching_oracle_against_exhaustive():
    rng = np.random.default_rng(3)
    for _ in range(10):
        X = rng.uniform(0, 1, size=(4, 3))
        Y = rng.uniform(0, 1, size=(5, 3))
        assert oracles.optimal_matches(X, Y, 0.6) == oracles.permutations_best(X, Y, 0.6)


@settings(max_examples=40)
@given(small_sets, small_sets)
def test_dsc_3d_symmetric_bounded(X, Y):
    d = dsc_3d(X, Y, 1.0)
    assert 0 <= d <= 1
    assert d == dsc_3d(Y, X, 1.0)
    assert dsc_3d(X, X) == 1.0


def test_margin_error_examples():
    tumor = np.zeros((1, 3))
    r = margin_error([[4.5, 0, 0], [0, 4.5, 0]], tumor)
    assert r.mean == pytest.approx(0.0, abs=1e-12)
    r = margin_error([[7.61, 0, 0]], tumor, margin=5.0, tool_offset=0.5)
    assert r.mean == pytest.approx(3.11, abs=1e-12)
    with pytest.raises(ValueError):
        margin_error(np.empty((0, 3)), tumor)


def test_margin_error_uniform_fixture():
    n, a = 101, 2.0
    eps = np.linspace(-a, a, n)
    incision = np.column_stack([5.0 - 0.5 + eps, np.zeros(n), np.zeros(n)])
    r = margin_error(incision, np.zeros((1, 3)))
    assert r.mean == pytest.approx(0.0, abs=1e-12)
    # population std of an evenly spaced grid on [-a, a]
    assert r.std == pytest.approx(a * np.sqrt((n + 1) / (3 * (n - 1))), rel=1e-12)
    assert r.mae == pytest.approx(np.abs(eps).mean(), rel=1e-12)


@given(small_sets, small_sets, st.floats(0, 3), st.floats(-2, 2))
def test_margin_error_offset_linearity_and_stats(inc, tum, offset, delta):
    r0 = margin_error(inc, tum, 5.0, offset)
    r1 = margin_error(inc, tum, 5.0, offset + delta)
    assert r1.mean - r0.mean == pytest.approx(delta, abs=1e-9)
    e = np.array(oracles.margin_errors(inc, tum, 5.0, offset))
    assert np.allclose(r0.errors, e, atol=1e-9)
    assert r0.std == pytest.approx(np.sqrt(np.mean((e - e.mean()) ** 2)), abs=1e-9)
    assert r0.mae == pytest.approx(np.abs(e).mean(), abs=1e-9)
