import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvae import evalkit
from cvae.evalkit import RESULT_COLUMNS, MetricsRecord, append_results, impute, neg_expected_llh, rmse_missing
from cvae.model import ModelSpec, VAEModel
from cvae.numcore import DimensionError
from cvae.objectives import elbo_partial

D, K = 3, 2
LOG_2PI = math.log(2 * math.pi)


def _model(kind="zi", seed=0):
    spec = ModelSpec(kind, D, K, enc_hidden=(8,), dec_hidden=(8,), embed_dim=4, set_hidden=(6,),
                     flow_layers=2, flow_hidden=8)
    return VAEModel.init(spec, np.random.default_rng(seed))


def _constant_decoder(model, mean, log_var=0.0):
    last = len(model.spec.dec_hidden)
    for name, p in model.params.items():
        if name.startswith("dec."):
            p.data[...] = 0.0
    b = model.params[f"dec.b{last}"].data
    b[:D] = np.log(np.asarray(mean) / (1 - np.asarray(mean)))
    b[D:] = log_var
    return model


# ---------------------------------------------------------------- impute

@pytest.mark.parametrize("kind", ["zi", "pnp", "flow", "miwae", "not_miwae"])
def test_impute_fully_observed_passthrough(kind):
    x = np.random.default_rng(0).random((5, D))
    out = impute(_model(kind), x, np.ones((5, D), bool), S=3)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("S", [1, 7, 100])
def test_impute_constant_decoder(S):
    model = _constant_decoder(_model(), 0.5)
    rng = np.random.default_rng(1)
    x = rng.random((6, D))
    m = rng.random((6, D)) < 0.5
    out = impute(model, x, m, S=S)
    np.testing.assert_array_equal(out[~m], 0.5)
    np.testing.assert_array_equal(out[m], x[m])


def test_impute_large_s_matches_single_forward():
    means = np.array([0.2, 0.6, 0.7])
    model = _constant_decoder(_model("miwae"), means)
    m = np.array([[True, False, False]])
    out = impute(model, np.array([[0.3, 0.0, 0.0]]), m, S=10**4)
    np.testing.assert_allclose(out[0, 1:], means[1:], rtol=0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["zi", "mask_zi", "flow", "not_miwae"]))
def test_impute_never_alters_observed(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.random((4, D))
    m = rng.random((4, D)) < 0.5
    out = impute(_model(kind, seed % 5), np.where(m, x, np.nan), m, S=5, rng=rng)
    np.testing.assert_array_equal(out[m], x[m])
    assert np.all(np.isfinite(out))


def test_impute_deterministic_given_seed():
    rng = np.random.default_rng(2)
    x = rng.random((4, D))
    m = rng.random((4, D)) < 0.5
    a = impute(_model(), x, m, 10, np.random.default_rng(5))
    b = impute(_model(), x, m, 10, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- RMSE

def test_rmse_perfect():
    x = np.random.default_rng(0).random((3, 4))
    assert rmse_missing(x, x, np.zeros((3, 4), bool)) == 0.0


def test_rmse_single_cell():
    assert rmse_missing([[0.5, 1.0]], [[0.0, 1.0]], [[False, True]]) == pytest.approx(0.5, abs=1e-15)


def test_rmse_two_rows():
    got = rmse_missing([[0.3, 0.0], [0.0, 0.4]], [[0.0, 0.0], [0.0, 0.0]], [[False, True], [True, False]])
    assert got == pytest.approx(math.sqrt((0.09 + 0.16) / 2), abs=1e-15)
    assert got == pytest.approx(0.35355, abs=1e-5)


def test_rmse_fully_observed_rows_count_in_n():
    got = rmse_missing([[0.5], [9.0]], [[0.0], [0.0]], [[False], [True]])
    assert got == pytest.approx(math.sqrt(0.25 / 2), abs=1e-15)


def test_rmse_per_cell_convention():
    imp = [[0.3, 0.4], [0.0, 0.0]]
    truth = np.zeros((2, 2))
    mask = [[False, False], [True, True]]
    assert rmse_missing(imp, truth, mask) == pytest.approx(math.sqrt(0.25 / 2), abs=1e-15)
    assert rmse_missing(imp, truth, mask, per_cell=True) == pytest.approx(math.sqrt(0.25 / 2), abs=1e-15)
    assert rmse_missing(imp, truth, [[False, True], [True, True]], per_cell=True) == pytest.approx(0.3)


def test_rmse_shape_mismatch():
    with pytest.raises(DimensionError):
        rmse_missing(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_row_permutation_invariant_and_zero_iff_exact(seed):
    rng = np.random.default_rng(seed)
    truth = rng.random((6, 3))
    m = rng.random((6, 3)) < 0.5
    imp = np.where(m, truth, rng.random((6, 3)))
    perm = rng.permutation(6)
    assert rmse_missing(imp, truth, m) == pytest.approx(rmse_missing(imp[perm], truth[perm], m[perm]), rel=1e-12)
    assert (rmse_missing(imp, truth, m) == 0.0) == bool(np.all(m))
    assert rmse_missing(np.where(m, imp, truth), truth, m) == 0.0


# ---------------------------------------------------------------- negative expected log-likelihood

def test_nllh_no_hidden_cells():
    x = np.random.default_rng(0).random((3, D))
    assert neg_expected_llh(_model(), x, np.ones((3, D), bool)) == 0.0


@pytest.mark.parametrize("S", [1, 10, 100])
def test_nllh_closed_form_and_s_independent(S):
    model = _constant_decoder(_model(), np.array([0.3, 0.5, 0.5]))
    truth = np.array([[0.3, 0.1, 0.9]])
    m = np.array([[False, True, True]])
    assert neg_expected_llh(model, truth, m, S) == pytest.approx(0.5 * LOG_2PI, abs=1e-12)


# ---------------------------------------------------------------- test ELBO

def test_test_elbo_composition():
    rng = np.random.default_rng(3)
    model = _model("mask_zi")
    x = rng.random((5, D))
    m = rng.random((5, D)) < 0.6
    got = evalkit.test_elbo(model, x, m, S=4, rng=np.random.default_rng(8))
    noise = np.random.default_rng(8).standard_normal((4, 5, K))
    want = np.mean([elbo_partial(model, x, m, noise[s]).total.data for s in range(4)], axis=0).mean()
    assert got == pytest.approx(want, rel=1e-12)


def test_test_elbo_reproducible():
    rng = np.random.default_rng(4)
    x, m = rng.random((5, D)), rng.random((5, D)) < 0.6
    a = evalkit.test_elbo(_model(), x, m, 1, np.random.default_rng(1))
    assert a == evalkit.test_elbo(_model(), x, m, 1, np.random.default_rng(1))


def test_test_elbo_monte_carlo_consistency():
    rng = np.random.default_rng(5)
    model = _model("pnp")
    x, m = rng.random((3, D)), rng.random((3, D)) < 0.6
    reps = [evalkit.test_elbo(model, x, m, 10**3, np.random.default_rng(100 + r)) for r in range(20)]
    big = evalkit.test_elbo(model, x, m, 10**4, np.random.default_rng(99))
    se = np.std(reps, ddof=1)
    assert abs(reps[0] - big) < 3 * se + 1e-12


# ---------------------------------------------------------------- results file

def test_append_results_stable_columns(tmp_path):
    path = tmp_path / "r.csv"
    append_results(path, MetricsRecord("housing", "pnp", True, 0.5, 0.1, 0.3, 0, 0.25, 1.5, -3.0), "hash=x")
    append_results(path, MetricsRecord("housing", "pnp", False, None, None, 0.3, 1, 0.3, None, None))
    lines = path.read_text().splitlines()
    assert lines[0] == "# hash=x"
    assert lines[1] == ",".join(RESULT_COLUMNS)
    assert lines[2] == "housing,pnp,1,0.5,0.1,0.3,0,0.25,1.5,-3.0"
    assert lines[3] == "housing,pnp,0,,,0.3,1,0.3,,"
