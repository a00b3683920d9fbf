"""Greedy active feature acquisition by information reward, and information curves.

For a row with observed set O, unobserved set U and target t, the reward of
candidate i is estimated as::

    E_{x_i} KL[q(z | x_i, x_O) || q(z | x_O)]
      - E_{x_t, x_i} KL[q(z | x_t, x_i, x_O) || q(z | x_t, x_O)]

with (x_t, x_i) drawn jointly from the model predictive given x_O: one
posterior z per draw, then one decoder draw of every feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evalkit import frozen, impute
from .model import GaussianPosterior, VAEModel
from .numcore import diag_gaussian_kl
from .numcore.tensor import ContractError

FLOW_KL_SAMPLES = 10


@dataclass
class AcquisitionState:
    """Observed features and values of one row, the target index and the error trace."""

    values: np.ndarray
    observed: np.ndarray
    target: int
    errors: list[float] = field(default_factory=list)
    order: list[int] = field(default_factory=list)

    @property
    def unobserved(self) -> np.ndarray:
        u = ~self.observed
        u[self.target] = False
        return np.flatnonzero(u)

    def acquire(self, j: int) -> None:
        if self.observed[j] or j == self.target:
            raise ContractError(f"feature {j} is already observed or is the target")
        self.observed[j] = True
        self.order.append(j)


def sample_predictive(model: VAEModel, x_row, o_mask, features, S: int,
                      rng: np.random.Generator) -> np.ndarray:
    """S joint draws of ``features`` from p(x_F | x_O); shape (S, |F|)."""
    features = np.asarray(features, dtype=int)
    o_mask = np.asarray(o_mask, dtype=bool)
    if np.any(o_mask[features]):
        raise ContractError("predictive features must be unobserved")
    draws = _predictive_all(frozen(model), np.asarray(x_row, float)[None], o_mask[None], S, rng)
    return draws[:, 0, features]


def _predictive_all(model: VAEModel, x, o_mask, S: int, rng) -> np.ndarray:
    """(S, R, d) draws of every feature, one z per draw."""
    R = x.shape[0]
    noise = rng.standard_normal((S, R, model.spec.latent))
    z, _ = model.posterior(np.where(o_mask, x, 0.0), o_mask).sample(noise)
    like = model.decode(z)
    eps = rng.standard_normal(like.mean.shape)
    return like.mean.data + np.exp(0.5 * like.log_var.data) * eps


def _kl(model: VAEModel, xa, ma, xb, mb, rng) -> np.ndarray:
    """KL(q(z | a) || q(z | b)) row by row."""
    pa = model.posterior(np.where(ma, xa, 0.0), ma)
    pb = model.posterior(np.where(mb, xb, 0.0), mb)
    if isinstance(pa, GaussianPosterior):
        return diag_gaussian_kl(pa.base, pb.base).data
    noise = rng.standard_normal((FLOW_KL_SAMPLES, xa.shape[0], model.spec.latent))
    z, _ = pa.sample(noise)
    return (pa.log_prob(z) - pb.log_prob(z)).data.mean(axis=0)


def reward_table(model: VAEModel, x, o_mask, target: int, S_outer: int, rng: np.random.Generator,
                 candidates: np.ndarray | None = None) -> np.ndarray:
    """Rewards for every (row, candidate); non-candidates hold -inf.

    ``x`` (R, d) holds the rows' values (only observed cells are read),
    ``o_mask`` (R, d) the observed sets.
    """
    model = frozen(model)
    x = np.asarray(x, dtype=float)
    o_mask = np.asarray(o_mask, dtype=bool)
    R, d = x.shape
    if candidates is None:
        candidates = ~o_mask
        candidates[:, target] = False
    if np.any(candidates & o_mask):
        raise ContractError("candidate features must be unobserved")
    if np.any(o_mask[:, target]):
        raise ContractError("the target must stay unobserved")
    draws = _predictive_all(model, x, o_mask, S_outer, rng)  # (S, R, d)
    rows, feats = np.nonzero(candidates)
    out = np.full((R, d), -np.inf)
    if rows.size == 0:
        return out
    P = rows.size
    # batch layout: sample-major, (S, P) flattened
    base_x = np.broadcast_to(x[rows], (S_outer, P, d)).copy()
    base_m = np.broadcast_to(o_mask[rows], (S_outer, P, d)).copy()
    s_idx = np.arange(S_outer)[:, None]
    p_idx = np.arange(P)[None, :]
    xi = draws[:, rows, feats]  # (S, P)
    xt = draws[:, rows, target]

    with_i_x, with_i_m = base_x.copy(), base_m.copy()
    with_i_x[s_idx, p_idx, feats[None, :]] = xi
    with_i_m[s_idx, p_idx, feats[None, :]] = True

    with_t_x, with_t_m = base_x.copy(), base_m.copy()
    with_t_x[:, :, target] = xt
    with_t_m[:, :, target] = True

    with_ti_x, with_ti_m = with_t_x.copy(), with_t_m.copy()
    with_ti_x[s_idx, p_idx, feats[None, :]] = xi
    with_ti_m[s_idx, p_idx, feats[None, :]] = True

    flat = (S_outer * P, d)
    first = _kl(model, with_i_x.reshape(flat), with_i_m.reshape(flat), base_x.reshape(flat),
                base_m.reshape(flat), rng).reshape(S_outer, P)
    second = _kl(model, with_ti_x.reshape(flat), with_ti_m.reshape(flat), with_t_x.reshape(flat),
                 with_t_m.reshape(flat), rng).reshape(S_outer, P)
    out[rows, feats] = first.mean(axis=0) - second.mean(axis=0)
    return out


def information_reward(model: VAEModel, state: AcquisitionState, i: int, S_outer: int = 10,
                       rng: np.random.Generator | None = None) -> float:
    if state.observed[i]:
        raise ContractError(f"feature {i} is already observed")
    if i == state.target:
        raise ContractError("the target cannot be acquired")
    rng = np.random.default_rng(0) if rng is None else rng
    cand = np.zeros((1, len(state.values)), dtype=bool)
    cand[0, i] = True
    table = reward_table(model, state.values[None], state.observed[None], state.target, S_outer, rng, cand)
    return float(table[0, i])


def select_next(model: VAEModel, state: AcquisitionState, S_outer: int = 10,
                rng: np.random.Generator | None = None) -> int:
    """argmax of the reward over U; ties go to the lowest index."""
    U = state.unobserved
    if U.size == 0:
        raise ContractError("no unobserved candidate features left")
    if U.size == 1:
        return int(U[0])
    rng = np.random.default_rng(0) if rng is None else rng
    table = reward_table(model, state.values[None], state.observed[None], state.target, S_outer, rng)
    return int(np.argmax(table[0]))


@dataclass
class InformationCurve:
    mse: np.ndarray  # per-step mean squared error over rows
    std_err: np.ndarray  # standard error of that mean
    selections: np.ndarray  # (rows, max_steps) acquired feature per step

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    def to_csv(self, header_comment: str | None = None) -> str:
        lines = [f"# {c}" for c in header_comment.splitlines()] if header_comment else []
        lines.append("step,mse,std_err,rmse")
        for s, (m, e) in enumerate(zip(self.mse, self.std_err)):
            lines.append(f"{s},{float(m)!r},{float(e)!r},{math.sqrt(m)!r}")
        return "\n".join(lines) + "\n"


def information_curve(model: VAEModel, truth, target: int, max_steps: int, S_outer: int = 10,
                      S_impute: int = 100, seed: int = 0, start_mask=None) -> InformationCurve:
    """Per-row greedy acquisition starting from O = {} (or ``start_mask``).

    Acquired values are revealed from ``truth``; after every step the target
    is predicted by :func:`impute` and its squared error recorded.
    """
    truth = np.asarray(truth, dtype=float)
    R, d = truth.shape
    if not 0 <= target < d:
        raise ContractError(f"target column {target} out of range for {d} features")
    if max_steps < 0 or max_steps > d - 1:
        raise ContractError(f"max_steps must lie in [0, {d - 1}]")
    o_mask = np.zeros((R, d), dtype=bool) if start_mask is None else np.asarray(start_mask, bool).copy()
    o_mask[:, target] = False
    model = frozen(model)
    sel_rng = np.random.default_rng([seed, 11])
    imp_rng = np.random.default_rng([seed, 12])

    def errors() -> np.ndarray:
        x_hat = impute(model, np.where(o_mask, truth, 0.0), o_mask, S_impute, imp_rng)
        return (x_hat[:, target] - truth[:, target]) ** 2

    errs = [errors()]
    picks = np.full((R, max_steps), -1, dtype=int)
    for step in range(max_steps):
        table = reward_table(model, truth, o_mask, target, S_outer, sel_rng)
        choice = np.argmax(table, axis=1)
        if np.any(o_mask[np.arange(R), choice]) or np.any(choice == target):
            raise ContractError("acquisition selected an observed feature")
        o_mask[np.arange(R), choice] = True
        picks[:, step] = choice
        errs.append(errors())
    errs = np.array(errs)
    mse = errs.mean(axis=1)
    se = errs.std(axis=1, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(len(errs))
    return InformationCurve(mse, se, picks)
