import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ucan.errors import ConfigError
from ucan.feature_maps import (
    KINDS, FeatureMap, HedgehogParams, apply_feature_map, elu_kernel_decomposition, feature_map_jacobian,
    finite_difference_jacobian, kernel_value,
)

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False, width=64)


def fmap(kind, d, m=1, seed=0, normalize=False):
    hh = HedgehogParams.init(d, m, seed) if kind == "hedgehog" else None
    return FeatureMap(kind, hh, normalize)


def elu1_oracle(x):
    return np.where(x > 0, x + 1, np.exp(x))


def test_symrelu_example():
    assert apply_feature_map(FeatureMap("symrelu"), np.array([[1.0, -2.0]])).tolist() == [[1, 0, 0, 2]]


def test_hedgehog_at_zero_is_ones():
    hh = HedgehogParams(np.eye(3, dtype=np.float32), np.zeros((1, 3), np.float32))
    assert np.array_equal(apply_feature_map(FeatureMap("hedgehog", hh), np.zeros((1, 3))), np.ones((1, 6)))


def test_relu_and_elu_match_elementwise_oracles(g):
    X = g.standard_normal((10, 7))
    assert np.array_equal(apply_feature_map(FeatureMap("relu"), X), np.maximum(X, 0))
    np.testing.assert_allclose(apply_feature_map(FeatureMap("elu1"), X), elu1_oracle(X), rtol=1e-12)


def test_hedgehog_matches_formula(g):
    d, m = 5, 3
    hh = HedgehogParams.init(d, m, 3)
    X = g.standard_normal((4, d))
    Z = X @ hh.W.astype(np.float64)
    expected = np.concatenate([np.exp(Z + b) for b in hh.b] + [np.exp(-Z - b) for b in hh.b], axis=1)
    np.testing.assert_allclose(apply_feature_map(FeatureMap("hedgehog", hh), X), expected, rtol=1e-6)


def test_hedgehog_dim_mismatch():
    with pytest.raises(ConfigError):
        apply_feature_map(fmap("hedgehog", 4), np.zeros((2, 5)))
    with pytest.raises(ConfigError):
        HedgehogParams.init(4, m=5)


def test_hedgehog_exponent_is_clamped():
    out = apply_feature_map(fmap("hedgehog", 2), np.array([[1e4, -1e4]]))
    assert np.all(np.isfinite(out)) and np.all(out > 0)


def test_kernel_value_examples():
    q, k = np.array([1.0, -2.0]), np.array([3.0, -4.0])
    assert kernel_value(FeatureMap("symrelu"), q, k) == 11
    assert kernel_value(FeatureMap("relu"), q, k) == 3
    assert kernel_value(FeatureMap("elu1"), np.zeros(6), np.zeros(6)) == 6


def test_decomposition_examples():
    assert elu_kernel_decomposition(np.zeros(4), np.zeros(4)) == (0, 0, 0, 4)
    assert elu_kernel_decomposition(np.ones(1), np.ones(1)) == (1, 1, 1, 1)


@pytest.mark.parametrize("d", [1, 4, 48])
def test_decomposition_sums_to_kernel(g, d):
    for _ in range(50):
        q, k = g.standard_normal(d), g.standard_normal(d)
        assert sum(elu_kernel_decomposition(q, k)) == pytest.approx(kernel_value(FeatureMap("elu1"), q, k), rel=1e-6)


def test_bias_dominance_at_d48(g):
    hits = 0
    for _ in range(100):
        s, qb, kb, d = elu_kernel_decomposition(g.standard_normal(48), g.standard_normal(48))
        hits += abs(qb + kb + d) > abs(s)
    assert hits >= 90


@given(arrays(np.float64, st.integers(1, 8), elements=floats), st.data())
@settings(max_examples=60, deadline=None)
def test_symrelu_splits_into_two_relus(q, data):
    k = data.draw(arrays(np.float64, q.shape, elements=floats))
    sym = kernel_value(FeatureMap("symrelu"), q, k)
    relu = FeatureMap("relu")
    assert sym == pytest.approx(kernel_value(relu, q, k) + kernel_value(relu, -q, -k), abs=1e-12)


@given(arrays(np.float64, 6, elements=floats), arrays(np.float64, 6, elements=floats), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_hedgehog_kernel_symmetric_and_positive(q, k, m):
    f = fmap("hedgehog", 6, m)
    a, b = kernel_value(f, q, k), kernel_value(f, k, q)
    assert a > 0 and a == pytest.approx(b, rel=1e-12)


@given(arrays(np.float64, 5, elements=st.floats(-1, 1, width=64)), arrays(np.float64, 5, elements=st.floats(-1, 1, width=64)))
@settings(max_examples=40, deadline=None)
def test_elu_kernel_positive_for_bounded_inputs(q, k):
    # |elu| <= 1 on [-1, 1], so the +d term keeps the four-term sum non-negative
    assert sum(elu_kernel_decomposition(q, k)) >= 0


@pytest.mark.parametrize("kind", KINDS)
def test_output_dim_table(kind):
    for d in range(1, 65):
        for m in ((1, 2, 3, 4) if kind == "hedgehog" else (1,)):
            f = fmap(kind, d, m)
            expected = {"symrelu": 2 * d, "hedgehog": 2 * m * d}.get(kind, d)
            assert f.out_dim(d) == expected
            assert apply_feature_map(f, np.zeros((1, d))).shape == (1, expected)


def _rel(J, F):
    return np.max(np.abs(J - F)) / max(np.max(np.abs(F)), 1e-12)


def test_jacobian_examples(g):
    assert np.array_equal(feature_map_jacobian(FeatureMap("identity"), g.standard_normal(4)), np.eye(4))
    hh = HedgehogParams.init(4, 1, 5)
    x = g.standard_normal(4)
    z = x @ hh.W.astype(np.float64)
    W = hh.W.astype(np.float64)
    expected = np.vstack([np.diag(np.exp(z)) @ W.T, -np.diag(np.exp(-z)) @ W.T])
    np.testing.assert_allclose(feature_map_jacobian(FeatureMap("hedgehog", hh), x), expected, rtol=1e-10)


# normalisation needs strictly positive row sums, so only the positive maps get it
@pytest.mark.parametrize("kind,normalize", [(k, False) for k in KINDS] + [("elu1", True), ("hedgehog", True)])
def test_jacobian_matches_finite_differences(g, kind, normalize):
    f = fmap(kind, 6, 2, normalize=normalize)
    for _ in range(10):
        x = g.standard_normal(6)
        x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep clear of ReLU kinks
        assert _rel(feature_map_jacobian(f, x), finite_difference_jacobian(f, x)) <= 1e-4
