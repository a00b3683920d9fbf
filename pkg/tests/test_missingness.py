import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvae.missingness import (
    MECHANISMS,
    MechanismSpec,
    am_rate,
    artificial_subset,
    first_half_columns,
    sample_mcar_mask,
    self_censoring_mask,
)


# ---------------------------------------------------------------- MCAR

def test_mcar_rate_zero_and_one():
    rng = np.random.default_rng(0)
    assert sample_mcar_mask(5, 4, 0.0, rng).all()
    assert not sample_mcar_mask(5, 4, 1.0, rng).any()


def test_mcar_binomial_fraction():
    m = sample_mcar_mask(100, 100, 0.3, np.random.default_rng(1))
    sd = math.sqrt(0.3 * 0.7 / 10**4)
    assert abs((~m).mean() - 0.3) < 4 * sd


def test_mcar_reproducible():
    a = sample_mcar_mask(10, 3, 0.5, np.random.default_rng(7))
    b = sample_mcar_mask(10, 3, 0.5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_mcar_bad_rate():
    with pytest.raises(ValueError):
        sample_mcar_mask(2, 2, 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- self-censoring

def test_self_censoring_definitional():
    np.testing.assert_array_equal(self_censoring_mask([[0.2], [0.8]])[:, 0], [True, False])


def test_self_censoring_constant_column():
    assert self_censoring_mask(np.full((4, 1), 3.0)).all()


def test_self_censoring_three_values():
    np.testing.assert_array_equal(self_censoring_mask([[1.0], [2.0], [3.0]])[:, 0], [True, True, False])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_self_censoring_row_order_free(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((12, 4))
    perm = rng.permutation(12)
    np.testing.assert_array_equal(self_censoring_mask(v)[perm], self_censoring_mask(v[perm]))


def test_self_censoring_idempotent():
    v = np.random.default_rng(2).standard_normal((30, 3))
    m = self_censoring_mask(v)
    np.testing.assert_array_equal(m, self_censoring_mask(v))


# ---------------------------------------------------------------- artificial subsets

def test_uniform_zero_keeps_q():
    q = np.random.default_rng(0).random((6, 5)) < 0.6
    p = artificial_subset(q, np.zeros((6, 5)), MechanismSpec("uniform", 0.0), np.random.default_rng(1))
    np.testing.assert_array_equal(p, q)


def test_uniform_one_empties():
    q = np.ones((6, 5), bool)
    p = artificial_subset(q, np.zeros((6, 5)), MechanismSpec("uniform", 1.0), np.random.default_rng(1))
    assert not p.any()


def test_mean_mechanism_rule():
    q = np.ones((2, 1), bool)
    p = artificial_subset(q, np.array([[0.1], [0.9]]), MechanismSpec("all_feature_mean", None),
                          np.random.default_rng(0))
    np.testing.assert_array_equal(p[:, 0], [True, False])


def test_half_mechanism_touches_first_half_only():
    v = np.random.default_rng(3).random((40, 5))
    q = np.ones_like(v, bool)
    p = artificial_subset(q, v, MechanismSpec("half_feature_variance", None), np.random.default_rng(0))
    np.testing.assert_array_equal(first_half_columns(5), [0, 1, 2])
    assert p[:, 3:].all()
    var = v[:, :3].var(axis=0)
    np.testing.assert_array_equal(p[:, :3], ~(v[:, :3] > var))


def test_mechanism_spec_validation():
    with pytest.raises(ValueError):
        MechanismSpec("uniform", None)
    with pytest.raises(ValueError):
        MechanismSpec("all_feature_mean", 0.3)
    with pytest.raises(ValueError):
        MechanismSpec("bogus", 0.3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(MECHANISMS), st.floats(0, 1))
def test_subset_law(seed, kind, p_remove):
    rng = np.random.default_rng(seed)
    v = rng.random((10, 6))
    q = rng.random((10, 6)) < 0.7
    spec = MechanismSpec(kind, p_remove if kind == "uniform" else None)
    p = artificial_subset(q, v, spec, rng)
    assert not np.any(p & ~q)


def test_uniform_drops_independent_across_cells():
    # chi-square test of independence between drop events of neighbouring cells
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(5)
    q = np.ones((5000, 2), bool)
    p = artificial_subset(q, np.zeros(q.shape), MechanismSpec("uniform", 0.4), rng)
    drop = ~p
    table = np.array([[np.sum(~drop[:, 0] & ~drop[:, 1]), np.sum(~drop[:, 0] & drop[:, 1])],
                      [np.sum(drop[:, 0] & ~drop[:, 1]), np.sum(drop[:, 0] & drop[:, 1])]])
    assert scipy_stats.chi2_contingency(table)[1] > 0.01


# ---------------------------------------------------------------- AM rate

def test_am_rate_moments_and_support():
    rng = np.random.default_rng(0)
    draws = np.array([am_rate(rng) for _ in range(10**5)])
    assert abs(draws.mean() - 0.35) < 0.01
    assert draws.min() >= 0 and draws.max() <= 0.7


def test_am_rate_reproducible():
    a = [am_rate(np.random.default_rng(4)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
