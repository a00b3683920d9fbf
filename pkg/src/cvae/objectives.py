"""Training objectives.

Every function works on a batch ``x`` of shape (B, d) with boolean masks of
the same shape and returns per-row values of shape (B,). Noise is supplied
explicitly: (B, K) for single-sample objectives, (M, B, K) for importance
weighted ones, so each objective is a pure function of its inputs.

The consistency-regularised loss is::

    total = elbo_Q - lam * (kl_QP - loglik_Pbar - elbo_P + elbo_Q)

with ``kl_QP = KL(q(z|x_Q) || q(z|x_P))`` and ``loglik_Pbar`` the likelihood of
the cells in Q but not in P evaluated at the sample drawn from q(z|x_Q).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from typing import Mapping, Sequence

import numpy as np

from .encoders import masked_log_likelihood
from .flows import FlowPosterior
from .missingness import MechanismSpec
from .model import IW_KINDS, GaussianPosterior, VAEModel
from .numcore import DiagGaussian, Tensor, bernoulli_log_mass, diag_gaussian_kl, kl_to_standard_normal, standard_normal_log_density
from .numcore import tensor as T
from .numcore.tensor import ContractError

COMPONENTS = ("elbo_Q", "elbo_P", "kl_QP", "loglik_Pbar", "reg_bracket")
LAMBDA_RANGE = (0.0, 1.5)


@dataclass
class LossBreakdown:
    """A loss value and its named parts (per row, or batch means after :meth:`mean`).

    ``rule`` names how ``total`` is composed from the parts:

    * ``elbo``: total = elbo_Q
    * ``regularized``: total = main - lam * reg_bracket, where
      reg_bracket = kl_QP - loglik_Pbar - elbo_P + elbo_Q and ``main`` is
      elbo_Q, or the full bound including the mask term for MNAR models
    * ``mnar``: total = elbo_Q + mask_term
    * ``bound``: total = main (importance weighted bound, elbo_Q is its data part)
    """

    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)
    rule: str = "elbo"
    lam: float = 0.0

    def mean(self) -> "LossBreakdown":
        return LossBreakdown(T.tmean(self.total), {k: T.tmean(v) for k, v in self.components.items()},
                             self.rule, self.lam)

    def values(self) -> dict[str, float]:
        out = {"total": float(np.mean(self.total.data))}
        out.update({k: float(np.mean(v.data)) for k, v in self.components.items()})
        return out

    def recompose(self) -> np.ndarray:
        """Rebuild ``total`` from the components according to ``rule``."""
        c = {k: v.data for k, v in self.components.items()}
        if self.rule == "elbo":
            return c["elbo_Q"]
        if self.rule == "mnar":
            return c["elbo_Q"] + c["mask_term"]
        if self.rule == "bound":
            return c["main"]
        bracket = c["kl_QP"] - c["loglik_Pbar"] - c["elbo_P"] + c["elbo_Q"]
        return c["main"] - self.lam * bracket


@dataclass(frozen=True)
class RegConfig:
    lam: float = 1.0
    mechanism: MechanismSpec = field(default_factory=MechanismSpec)
    samples: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.samples < 1:
            raise ValueError("samples per expectation must be positive")
        if not LAMBDA_RANGE[0] <= self.lam <= LAMBDA_RANGE[1]:
            warnings.warn(f"lambda {self.lam} is outside the tuned range [0.01, 1.5]", stacklevel=2)


# ---------------------------------------------------------------- helpers

def _masks(x, *masks):
    x = np.asarray(x, dtype=float)
    return (x,) + tuple(np.asarray(m, dtype=bool) for m in masks)


def _kl_prior(post, z: Tensor, log_q: Tensor) -> Tensor:
    """Analytic KL to N(0, I) for Gaussian posteriors, else the sample estimate."""
    if isinstance(post, GaussianPosterior):
        return kl_to_standard_normal(post.base)
    return log_q - standard_normal_log_density(z)


def posterior_kl(post_q, post_p, z: Tensor | None = None) -> Tensor:
    """KL(post_q || post_p): closed form for Gaussians, log-ratio at ``z`` for flows."""
    if isinstance(post_q, GaussianPosterior) and isinstance(post_p, GaussianPosterior):
        return diag_gaussian_kl(post_q.base, post_p.base)
    if z is None:
        raise ContractError("flow posteriors need samples from post_q to estimate the KL")
    return _log_ratio_mean(post_q, post_p, z)


def _log_ratio_mean(post_q, post_p, z: Tensor) -> Tensor:
    ratio = post_q.log_prob(z) - post_p.log_prob(z)
    if z.ndim > post_q.base.mean.ndim:
        return T.tmean(ratio, axis=0)
    return ratio


def flow_kl_estimate(q_Q: FlowPosterior, q_P: FlowPosterior, noises) -> Tensor:
    """(1/M) sum_m [log q_Q(z_m) - log q_P(z_m)] with z_m drawn from q_Q.

    ``noises`` has shape (M, B, K). Both log densities are evaluated through the
    same inverse path, so identical posteriors give exactly zero.
    """
    z, _ = q_Q.sample(noises)
    return _log_ratio_mean(q_Q, q_P, z)


def completed(x, mask, dec_mean: Tensor) -> Tensor:
    """Observed cells from ``x``; missing cells from the decoder mean."""
    x, mask = _masks(x, mask)
    keep = mask.astype(float)
    return dec_mean * (1.0 - keep) + np.where(mask, x, 0.0)


def mask_log_mass(model: VAEModel, x, mask, dec_mean: Tensor) -> Tensor:
    """log p(m | x_completed) under the self-masking head (pi = P(observed))."""
    pi = model.mask_probs(completed(x, mask, dec_mean))
    return bernoulli_log_mass(np.asarray(mask, dtype=float), pi)


# ---------------------------------------------------------------- single-sample ELBOs

def elbo_partial(model: VAEModel, x, q_mask, noise, kl: str = "analytic") -> LossBreakdown:
    """log p(x_Q | z) - KL(q(z | x_Q) || N(0, I)) with one reparameterised z.

    ``kl="sample"`` replaces the analytic KL by ``log q(z) - log p(z)`` at the
    same z (flows always use the sample form).
    """
    x, q_mask = _masks(x, q_mask)
    post = model.posterior(x, q_mask)
    z, log_q = post.sample(noise)
    like = model.decode(z)
    ll = masked_log_likelihood(like, x, q_mask)
    if kl == "sample":
        # summed in the same order as the importance weights, so M = 1 agrees bit for bit
        log_prior = standard_normal_log_density(z)
        kl_term = log_q - log_prior
        elbo = ll + log_prior - log_q
    else:
        kl_term = _kl_prior(post, z, log_q)
        elbo = ll - kl_term
    return LossBreakdown(elbo, {"elbo_Q": elbo, "loglik_Q": ll, "kl_prior": kl_term}, "elbo")


def iw_log_weights(model: VAEModel, x, q_mask, noises, with_mask: bool):
    x, q_mask = _masks(x, q_mask)
    noises = T.as_tensor(noises)
    if noises.ndim != x.ndim + 1:
        raise ContractError(f"importance weighted bounds need noise of shape (M, B, K), got {noises.shape}")
    post = model.posterior(x, q_mask)
    z, log_q = post.sample(noises)
    like = model.decode(z)
    ll = masked_log_likelihood(like, x, q_mask)
    log_w = ll + standard_normal_log_density(z) - log_q
    mask_term = None
    if with_mask:
        mask_term = mask_log_mass(model, x, q_mask, like.mean)
        log_w = log_w + mask_term
    return log_w, post, z, like, mask_term


def _log_mean_exp(log_w: Tensor) -> Tensor:
    return T.logsumexp(log_w, axis=0) - math.log(log_w.shape[0])


def miwae_bound(model: VAEModel, x, q_mask, noises) -> Tensor:
    """log (1/M) sum_k p(x_Q | z_k) p(z_k) / q(z_k | x_Q) per row."""
    log_w, *_ = iw_log_weights(model, x, q_mask, noises, with_mask=False)
    return _log_mean_exp(log_w)


def not_miwae_bound(model: VAEModel, x, m, noises) -> Tensor:
    """MIWAE log-weights plus the self-masking Bernoulli term for the mask ``m``."""
    log_w, *_ = iw_log_weights(model, x, m, noises, with_mask=True)
    return _log_mean_exp(log_w)


def mnar_flow_elbo(model: VAEModel, x, m, noise) -> LossBreakdown:
    """(A) flow ELBO on the observed cells + (B) log p(m | z) via the completed row."""
    x, m = _masks(x, m)
    post = model.posterior(x, m)
    z, log_q = post.sample(noise)
    like = model.decode(z)
    ll = masked_log_likelihood(like, x, m)
    elbo = ll + standard_normal_log_density(z) - log_q
    mask_term = mask_log_mass(model, x, m, like.mean)
    return LossBreakdown(elbo + mask_term, {"elbo_Q": elbo, "mask_term": mask_term}, "mnar")


# ---------------------------------------------------------------- model-level dispatch

@dataclass
class _Terms:
    main: Tensor  # full objective for this mask (with the mask term for MNAR kinds)
    bound: Tensor  # data-only bound used inside the consistency bracket
    post: object
    like: DiagGaussian  # decoder output at the first (or only) latent sample
    mask_term: Tensor | None = None


def _model_terms(model: VAEModel, x, mask, noise) -> _Terms:
    x, mask = _masks(x, mask)
    if model.kind in IW_KINDS:
        log_w, post, _, like, _ = iw_log_weights(model, x, mask, noise, with_mask=False)
        bound = _log_mean_exp(log_w)
        main = bound
        if model.kind == "not_miwae":
            main = _log_mean_exp(log_w + mask_log_mass(model, x, mask, like.mean))
        return _Terms(main, bound, post, DiagGaussian(like.mean[0], like.log_var[0]))
    post = model.posterior(x, mask)
    z, log_q = post.sample(noise)
    like = model.decode(z)
    ll = masked_log_likelihood(like, x, mask)
    elbo = ll - _kl_prior(post, z, log_q)
    if model.kind == "flow_mnar":
        mask_term = mask_log_mass(model, x, mask, like.mean)
        return _Terms(elbo + mask_term, elbo, post, like, mask_term)
    return _Terms(elbo, elbo, post, like)


def model_objective(model: VAEModel, x, q_mask, noise) -> LossBreakdown:
    """The unregularised objective of the model's family."""
    t = _model_terms(model, x, q_mask, noise)
    if t.mask_term is not None:
        return LossBreakdown(t.main, {"elbo_Q": t.bound, "mask_term": t.mask_term}, "mnar")
    if t.main is not t.bound:
        return LossBreakdown(t.main, {"main": t.main, "elbo_Q": t.bound}, "bound")
    return LossBreakdown(t.main, {"elbo_Q": t.bound}, "elbo")


def regularized_loss(model: VAEModel, x, q_mask, p_mask, lam: float, noise_q, noise_p) -> LossBreakdown:
    """elbo_Q - lam * (kl_QP - loglik_Pbar - elbo_P + elbo_Q), per row.

    For importance weighted and MNAR kinds the leading term is the model's full
    objective while the bracket uses the data-only bounds; with Gaussian
    encoders kl_QP is closed form, with flows it is the log-ratio at the
    samples from q(z | x_Q).
    """
    x, q_mask, p_mask = _masks(x, q_mask, p_mask)
    if q_mask.shape != p_mask.shape:
        raise ContractError(f"mask shapes differ: Q {q_mask.shape}, P {p_mask.shape}")
    bad = p_mask & ~q_mask
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ContractError(f"P is not a subset of Q: cell ({i}, {j}) observed in P but not in Q")
    tq = _model_terms(model, x, q_mask, noise_q)
    tp = _model_terms(model, x, p_mask, noise_p)
    if isinstance(tq.post, GaussianPosterior):
        kl_qp = diag_gaussian_kl(tq.post.base, tp.post.base)
    else:
        z_all = tq.post.sample(noise_q)[0]
        kl_qp = _log_ratio_mean(tq.post, tp.post, z_all)
    loglik_pbar = masked_log_likelihood(tq.like, x, q_mask & ~p_mask)
    bracket = kl_qp - loglik_pbar - tp.bound + tq.bound
    total = tq.main - bracket * float(lam)
    comps = {"main": tq.main, "elbo_Q": tq.bound, "elbo_P": tp.bound, "kl_QP": kl_qp,
             "loglik_Pbar": loglik_pbar, "reg_bracket": bracket}
    return LossBreakdown(total, comps, "regularized", float(lam))


# ---------------------------------------------------------------- discrete toy oracle

def enumerate_posterior(prior: Sequence, likelihoods: Sequence[Sequence[Sequence]], observed: Mapping[int, int]):
    """Exact p(z | x_O) for a discrete model with features independent given z.

    ``prior[z]`` is p(z); ``likelihoods[j][z][v]`` is p(x_j = v | z);
    ``observed`` maps feature index to value. Works with Fractions for exact
    arithmetic.
    """
    joint = []
    for z, pz in enumerate(prior):
        w = pz
        for j, v in observed.items():
            w = w * likelihoods[j][z][v]
        joint.append(w)
    total = sum(joint)
    return [w / total for w in joint]


def consistency_identity_holds(prior, likelihoods, q_obs: Mapping[int, int], p_features: Sequence[int]) -> bool:
    """Check p(z | x_Q) ∝ p(z | x_P) p(x_{Q without P} | z) exactly by enumeration."""
    p_obs = {j: v for j, v in q_obs.items() if j in set(p_features)}
    rest = {j: v for j, v in q_obs.items() if j not in p_obs}
    post_q = enumerate_posterior(prior, likelihoods, q_obs)
    post_p = enumerate_posterior(prior, likelihoods, p_obs)
    unnorm = []
    for z, pp in enumerate(post_p):
        w = pp
        for j, v in rest.items():
            w = w * likelihoods[j][z][v]
        unnorm.append(w)
    s = sum(unnorm)
    return all(a == b / s for a, b in zip(post_q, unnorm))


def toy_model_all_cases(prior, likelihoods) -> int:
    """Run the identity over every full observation and every subset P; returns cases checked.

    Raises AssertionError on the first failing case.
    """
    d = len(likelihoods)
    n_vals = [len(likelihoods[j][0]) for j in range(d)]
    checked = 0
    for values in product(*[range(n) for n in n_vals]):
        q_obs = dict(enumerate(values))
        for size in range(d + 1):
            for p_feats in combinations(range(d), size):
                if not consistency_identity_holds(prior, likelihoods, q_obs, p_feats):
                    raise AssertionError(f"identity fails for x={values}, P={p_feats}")
                checked += 1
    return checked


def random_fraction_model(rng: np.random.Generator, d: int = 2, n_z: int = 2, n_vals: int = 2, denom: int = 97):
    """Random discrete toy model with exact rational probabilities."""

    def simplex(k):
        raw = rng.integers(1, denom, size=k)
        return [Fraction(int(r), int(raw.sum())) for r in raw]

    prior = simplex(n_z)
    likelihoods = [[simplex(n_vals) for _ in range(n_z)] for _ in range(d)]
    return prior, likelihoods
