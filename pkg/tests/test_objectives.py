import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check
from cvae.model import IW_KINDS, MODEL_KINDS, ModelSpec, VAEModel
from cvae.numcore import ContractError, Tensor
from cvae.numcore import tensor as T
from cvae.objectives import (
    RegConfig,
    consistency_identity_holds,
    elbo_partial,
    enumerate_posterior,
    flow_kl_estimate,
    miwae_bound,
    mnar_flow_elbo,
    model_objective,
    not_miwae_bound,
    random_fraction_model,
    regularized_loss,
    toy_model_all_cases,
)

LOG_2PI = math.log(2 * math.pi)
D, K = 3, 2


def _model(kind, seed=0, d=D, latent=K):
    spec = ModelSpec(kind, d, latent, enc_hidden=(8,), dec_hidden=(8,), embed_dim=4, set_hidden=(6,),
                     flow_layers=2, flow_hidden=8)
    rng = np.random.default_rng(seed)
    model = VAEModel.init(spec, rng, column_means=np.full(d, 0.5))
    # break the flat initial flow so flow terms are exercised
    for name, p in model.params.items():
        if name.startswith("flow."):
            p.data[...] = rng.normal(0, 0.3, p.data.shape)
        if name == "mask.a":
            p.data[...] = rng.normal(0, 2.0, p.data.shape)
    return model


def _noise(kind, rng, rows, M=3):
    shape = (M, rows, K) if kind in IW_KINDS else (rows, K)
    return rng.standard_normal(shape)


def _data(rng, rows=4, d=D, rate=0.6):
    return rng.random((rows, d)), rng.random((rows, d)) < rate


def _set_prior_encoder(model):
    for name, p in model.params.items():
        if name.startswith("enc.head"):
            p.data[...] = 0.0


def _set_constant_decoder(model, mean, log_var=0.0):
    last = len(model.spec.dec_hidden)
    for name, p in model.params.items():
        if name.startswith("dec."):
            p.data[...] = 0.0
    b = model.params[f"dec.b{last}"].data
    b[:D] = math.log(mean / (1 - mean))
    b[D:] = log_var


def _np_kl(mq, lq, mp, lp):
    return 0.5 * np.sum(np.exp(lq - lp) + (mq - mp) ** 2 / np.exp(lp) - 1 + lp - lq, axis=-1)


def _np_ll(x, mean, lv, mask):
    cell = -0.5 * ((x - mean) ** 2 / np.exp(lv) + lv + LOG_2PI)
    return np.where(mask, cell, 0.0).sum(axis=-1)


# ---------------------------------------------------------------- partial ELBO

def test_elbo_closed_form_single_cell():
    model = _model("zi")
    _set_prior_encoder(model)
    _set_constant_decoder(model, 0.3)
    x = np.array([[0.3, 0.9, 0.1]])
    m = np.array([[True, False, False]])
    out = elbo_partial(model, x, m, np.random.default_rng(0).standard_normal((1, K)))
    assert out.total.data[0] == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)


def test_elbo_empty_q_is_negative_kl():
    model = _model("mask_zi", 1)
    x = np.random.default_rng(1).random((2, D))
    m = np.zeros((2, D), bool)
    out = elbo_partial(model, x, m, np.zeros((2, K)))
    np.testing.assert_array_equal(out.total.data, -out.components["kl_prior"].data)
    assert np.all(out.components["loglik_Q"].data == 0.0)


@pytest.mark.parametrize("kind", ["zi", "mask_zi", "pnp"])
def test_elbo_composition_oracle(kind):
    rng = np.random.default_rng(2)
    model = _model(kind, 2)
    x, m = _data(rng)
    noise = rng.standard_normal((4, K))
    post = model.posterior(x, m).base
    mu, lv = post.mean.data, post.log_var.data
    z = mu + np.exp(0.5 * lv) * noise
    like = model.decode(z)
    expected = _np_ll(x, like.mean.data, like.log_var.data, m) - _np_kl(mu, lv, 0.0, 0.0)
    np.testing.assert_allclose(elbo_partial(model, x, m, noise).total.data, expected, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- regularized loss

@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_lambda_zero_is_plain_objective(kind):
    rng = np.random.default_rng(3)
    model = _model(kind, 3)
    x, q = _data(rng)
    p = q & (rng.random(q.shape) < 0.5)
    nq, npp = _noise(kind, rng, 4), _noise(kind, rng, 4)
    reg = regularized_loss(model, x, q, p, 0.0, nq, npp)
    plain = model_objective(model, x, q, nq)
    np.testing.assert_array_equal(reg.total.data, plain.total.data)


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("lam", [0.3, 1.0, 1.5])
def test_p_equals_q_bracket_vanishes(kind, lam):
    rng = np.random.default_rng(4)
    model = _model(kind, 4)
    x, q = _data(rng)
    noise = _noise(kind, rng, 4)
    reg = regularized_loss(model, x, q, q, lam, noise, noise)
    plain = model_objective(model, x, q, noise)
    np.testing.assert_array_equal(reg.components["kl_QP"].data, 0.0)
    np.testing.assert_array_equal(reg.components["loglik_Pbar"].data, 0.0)
    np.testing.assert_array_equal(reg.total.data, plain.total.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.5), st.sampled_from(["zi", "mask_zi", "pnp"]))
def test_regularized_component_oracle(seed, lam, kind):
    rng = np.random.default_rng(seed)
    model = _model(kind, seed % 11)
    x, q = _data(rng)
    p = q & (rng.random(q.shape) < 0.5)
    nq, npp = rng.standard_normal((4, K)), rng.standard_normal((4, K))
    out = regularized_loss(model, x, q, p, lam, nq, npp)
    elbo_q = elbo_partial(model, x, q, nq).total.data
    elbo_p = elbo_partial(model, x, p, npp).total.data
    bq, bp = model.posterior(x, q).base, model.posterior(x, p).base
    kl = _np_kl(bq.mean.data, bq.log_var.data, bp.mean.data, bp.log_var.data)
    zq = bq.mean.data + np.exp(0.5 * bq.log_var.data) * nq
    like = model.decode(zq)
    pbar = _np_ll(x, like.mean.data, like.log_var.data, q & ~p)
    expected = elbo_q - lam * (kl - pbar - elbo_p + elbo_q)
    np.testing.assert_allclose(out.total.data, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.recompose(), out.total.data, rtol=0, atol=1e-12)


def test_subset_violation_names_cell():
    model = _model("zi")
    q = np.ones((2, D), bool)
    q[1, 2] = False
    p = np.ones((2, D), bool)
    with pytest.raises(ContractError, match=r"\(1, 2\)"):
        regularized_loss(model, np.zeros((2, D)), q, p, 1.0, np.zeros((2, K)), np.zeros((2, K)))


def test_reg_config_range():
    with pytest.warns(UserWarning):
        RegConfig(lam=2.0)
    with pytest.raises(ValueError):
        RegConfig(lam=-0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        RegConfig(lam=1.0)


# ---------------------------------------------------------------- flow KL

def test_flow_kl_identical_posteriors_zero():
    rng = np.random.default_rng(5)
    model = _model("flow", 5)
    x, q = _data(rng)
    post = model.posterior(x, q)
    est = flow_kl_estimate(post, model.posterior(x, q), rng.standard_normal((7, 4, K)))
    np.testing.assert_array_equal(est.data, 0.0)


def test_flat_flow_kl_matches_closed_form():
    rng = np.random.default_rng(6)
    model = _model("flow", 6)
    for name, p in model.params.items():
        if name.startswith("flow."):
            p.data[...] = 0.0
    x, q = _data(rng, rows=2)
    p = q & (rng.random(q.shape) < 0.4)
    pq, pp = model.posterior(x, q), model.posterior(x, p)
    M = 10**4
    z, _ = pq.sample(rng.standard_normal((M, 2, K)))
    ratios = (pq.log_prob(z) - pp.log_prob(z)).data
    closed = _np_kl(pq.base.mean.data, pq.base.log_var.data, pp.base.mean.data, pp.base.log_var.data)
    se = ratios.std(axis=0, ddof=1) / math.sqrt(M)
    assert np.all(np.abs(ratios.mean(axis=0) - closed) < 3 * se + 1e-12)


def test_flow_kl_nonnegative_on_average():
    rng = np.random.default_rng(7)
    model = _model("flow", 7)
    x, q = _data(rng, rows=3)
    p = q & (rng.random(q.shape) < 0.5)
    pq, pp = model.posterior(x, q), model.posterior(x, p)
    draws = np.array([flow_kl_estimate(pq, pp, rng.standard_normal((5, 3, K))).data for _ in range(400)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(draws.mean(axis=0) >= -3 * se)


# ---------------------------------------------------------------- MIWAE

def test_miwae_single_sample_is_stochastic_elbo():
    rng = np.random.default_rng(8)
    model = _model("miwae", 8)
    x, q = _data(rng)
    noise = rng.standard_normal((4, K))
    bound = miwae_bound(model, x, q, noise[None])
    elbo = elbo_partial(model, x, q, noise, kl="sample").total
    np.testing.assert_array_equal(bound.data, elbo.data)


@pytest.mark.parametrize("M", [1, 2, 7, 32])
def test_miwae_exact_when_q_is_prior_and_decoder_ignores_z(M):
    model = _model("miwae", 9)
    _set_prior_encoder(model)
    _set_constant_decoder(model, 0.4, log_var=-1.0)
    rng = np.random.default_rng(9)
    x, q = _data(rng)
    expected = _np_ll(x, 0.4, -1.0, q)
    got = miwae_bound(model, x, q, rng.standard_normal((M, 4, K))).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_iw_bound_monotone_in_expectation():
    # 100 random rows, each bound averaged over 1000 replications of nested sample sets
    rng = np.random.default_rng(10)
    model = _model("miwae", 10)
    rows, reps = 100, 1000
    x, q = _data(rng, rows=rows)
    xr, qr = np.tile(x, (reps, 1)), np.tile(q, (reps, 1))
    noise = rng.standard_normal((16, rows * reps, K))
    means = []
    diffs = []
    prev = None
    for k in range(5):
        b = miwae_bound(model, xr, qr, noise[: 2**k]).data.reshape(reps, rows)
        means.append(b.mean(axis=0))
        if prev is not None:
            diffs.append(b - prev)
        prev = b
    for k, dif in enumerate(diffs):
        se = dif.std(axis=0, ddof=1) / math.sqrt(reps)
        assert np.all(means[k + 1] - means[k] > -3 * se - 1e-12), f"M={2**(k+1)}"


# ---------------------------------------------------------------- Not-MIWAE

def test_not_miwae_half_probability_shift():
    rng = np.random.default_rng(11)
    model = _model("not_miwae", 11)
    model.params["mask.a"].data[...] = 0.0
    x, m = _data(rng)
    noise = rng.standard_normal((5, 4, K))
    shifted = not_miwae_bound(model, x, m, noise).data
    plain = miwae_bound(model, x, m, noise).data
    np.testing.assert_allclose(shifted, plain + D * math.log(0.5), rtol=0, atol=1e-12)


def test_not_miwae_fully_observed_certain_mask():
    rng = np.random.default_rng(12)
    model = _model("not_miwae", 12)
    model.params["mask.a"].data[...] = 60.0
    model.params["mask.b"].data[...] = -1.0
    x = rng.random((3, D))
    m = np.ones((3, D), bool)
    noise = rng.standard_normal((4, 3, K))
    # probabilities are clamped to 1 - 1e-6, so each observed cell costs at most ~1e-6 nats
    gap = miwae_bound(model, x, m, noise).data - not_miwae_bound(model, x, m, noise).data
    np.testing.assert_allclose(gap, -D * math.log1p(-1e-6), rtol=1e-9, atol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_not_miwae_hand_assembled(seed):
    rng = np.random.default_rng(seed)
    model = _model("not_miwae", seed % 13)
    x, m = _data(rng)
    noise = rng.standard_normal((3, 4, K))
    base = model.posterior(x, m).base
    mu, lv = base.mean.data, base.log_var.data
    z = mu + np.exp(0.5 * lv) * noise
    like = model.decode(z)
    mean, dlv = like.mean.data, like.log_var.data
    log_q = np.sum(-0.5 * ((z - mu) ** 2 / np.exp(lv) + lv + LOG_2PI), axis=-1)
    log_p = np.sum(-0.5 * (z**2 + LOG_2PI), axis=-1)
    xhat = np.where(m, x, mean)
    a, b = model.params["mask.a"].data, model.params["mask.b"].data
    pi = 1 / (1 + np.exp(-a * (xhat - b)))
    mask_term = np.sum(np.where(m, np.log(pi), np.log1p(-pi)), axis=-1)
    log_w = _np_ll(x, mean, dlv, m) + log_p - log_q + mask_term
    mx = log_w.max(axis=0)
    expected = mx + np.log(np.exp(log_w - mx).mean(axis=0))
    np.testing.assert_allclose(not_miwae_bound(model, x, m, noise).data, expected, rtol=0, atol=1e-10)


# ---------------------------------------------------------------- MNAR flow ELBO

def test_mnar_flow_half_probability_shift():
    rng = np.random.default_rng(14)
    model = _model("flow_mnar", 14)
    model.params["mask.a"].data[...] = 0.0
    x, m = _data(rng)
    out = mnar_flow_elbo(model, x, m, rng.standard_normal((4, K)))
    np.testing.assert_allclose(out.total.data, out.components["elbo_Q"].data + D * math.log(0.5), atol=1e-12)
    np.testing.assert_allclose(out.recompose(), out.total.data, rtol=0, atol=1e-12)


def test_mnar_flow_fully_observed_certain_mask():
    rng = np.random.default_rng(15)
    model = _model("flow_mnar", 15)
    model.params["mask.a"].data[...] = 60.0
    model.params["mask.b"].data[...] = -1.0
    x = rng.random((3, D))
    out = mnar_flow_elbo(model, x, np.ones((3, D), bool), rng.standard_normal((3, K)))
    gap = out.components["elbo_Q"].data - out.total.data
    np.testing.assert_allclose(gap, -D * math.log1p(-1e-6), rtol=1e-9, atol=0)


# ---------------------------------------------------------------- all kinds

@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_bounds_finite_for_sparse_rows(kind):
    rng = np.random.default_rng(16)
    model = _model(kind, 16)
    x = rng.random((2, D))
    m = np.array([[False, False, False], [False, True, False]])
    noise = _noise(kind, rng, 2)
    assert np.all(np.isfinite(model_objective(model, x, m, noise).total.data))
    reg = regularized_loss(model, x, m, np.zeros_like(m), 1.0, noise, _noise(kind, rng, 2))
    assert np.all(np.isfinite(reg.total.data))
    np.testing.assert_allclose(reg.recompose(), reg.total.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("regularized", [False, True])
def test_loss_gradients_finite_difference(kind, regularized):
    rng = np.random.default_rng(17)
    model = _model(kind, 17)
    x, q = _data(rng, rows=3)
    q[:, 0] = True
    p = q & (rng.random(q.shape) < 0.5)
    nq, npp = _noise(kind, rng, 3), _noise(kind, rng, 3)

    def fn():
        if regularized:
            return T.tmean(regularized_loss(model, x, q, p, 0.7, nq, npp).total)
        return T.tmean(model_objective(model, x, q, nq).total)

    assert finite_difference_check(fn, model.params, max_entries=8, seed=1) < 1e-4


# ---------------------------------------------------------------- discrete toy oracle

def test_toy_posterior_normalised_exactly():
    prior, lik = random_fraction_model(np.random.default_rng(0))
    post = enumerate_posterior(prior, lik, {0: 1})
    assert sum(post) == 1 and all(isinstance(p, Fraction) for p in post)


@pytest.mark.parametrize("seed", range(10))
def test_consistency_identity_on_toy_models(seed):
    rng = np.random.default_rng(seed)
    prior, lik = random_fraction_model(rng, d=2 + seed % 2, n_z=2, n_vals=2 + seed % 2)
    assert toy_model_all_cases(prior, lik) > 0


def test_identity_detects_wrong_factor():
    # dropping the P-bar likelihood factor breaks the identity on some case
    prior = [Fraction(1, 2), Fraction(1, 2)]
    lik = [[[Fraction(9, 10), Fraction(1, 10)], [Fraction(2, 10), Fraction(8, 10)]]] * 2
    assert consistency_identity_holds(prior, lik, {0: 0, 1: 1}, [0, 1])
    post_q = enumerate_posterior(prior, lik, {0: 0, 1: 1})
    post_p = enumerate_posterior(prior, lik, {0: 0})
    assert post_q != post_p
