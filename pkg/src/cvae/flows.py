"""Piecewise-linear coupling flows on top of a diagonal Gaussian base.

Sampling path::

    z0 = mean + std * eps            (base Gaussian)
    u0 = sigmoid(z0)                 (squash to the unit cube)
    u_l = f_l(... f_1(u0))           (couplings on (0, 1)^K)
    z  = logit(u_l)                  (unsquash back to R^K)

and ``log q(z) = log N(z0) - [log|sigmoid'| + sum log|f_i'| + log|logit'|]``.

Each coupling keeps half of the coordinates fixed and pushes the other half
through a monotone piecewise-linear CDF with ``bins`` equal-width bins whose
masses come from a softmax over conditioner outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numcore import DiagGaussian, MLPSpec, Tensor, init_mlp, mlp_forward
from .numcore import tensor as T
from .numcore.distributions import LOG_2PI

U_EPS = 1e-6


class FlowNumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    latent: int
    context: int
    layers: int = 4
    bins: int = 10
    cond_hidden: int = 64
    squash: bool = True

    def __post_init__(self):
        if self.layers > 0 and not self.squash:
            raise ValueError("couplings act on (0, 1)^K and need the squash bijections")
        if self.layers > 0 and self.latent < 2:
            raise ValueError("coupling flows need latent dimension >= 2")

    def transformed(self, layer: int) -> np.ndarray:
        half = self.latent // 2
        return np.arange(half, self.latent) if layer % 2 == 0 else np.arange(half)

    def fixed(self, layer: int) -> np.ndarray:
        half = self.latent // 2
        return np.arange(half) if layer % 2 == 0 else np.arange(half, self.latent)

    def conditioner(self, layer: int) -> MLPSpec:
        n_in = len(self.fixed(layer)) + self.context
        n_out = len(self.transformed(layer)) * self.bins
        return MLPSpec((n_in, self.cond_hidden, n_out), "elu", "identity")

    def to_dict(self) -> dict:
        return {"latent": self.latent, "context": self.context, "layers": self.layers,
                "bins": self.bins, "cond_hidden": self.cond_hidden, "squash": self.squash}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlowSpec":
        return cls(**d)


def init_flow(spec: FlowSpec, rng: np.random.Generator, prefix: str = "flow") -> dict[str, Tensor]:
    """Conditioners start with a zero output layer, i.e. flat bins (identity couplings)."""
    params = {}
    for i in range(spec.layers):
        cond = spec.conditioner(i)
        p = init_mlp(cond, rng, f"{prefix}.c{i}")
        last = cond.n_layers - 1
        p[f"{prefix}.c{i}.W{last}"].data[...] = 0.0
        params.update(p)
    return params


# ---------------------------------------------------------------- one coupling

def _clamp_unit(u: Tensor, counter: dict | None) -> Tensor:
    n_bad = int(np.count_nonzero((u.data < U_EPS) | (u.data > 1.0 - U_EPS)))
    if n_bad and counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + n_bad
    return T.clip(u, U_EPS, 1.0 - U_EPS) if n_bad else u


def pwl_forward(u, bin_probs, counter: dict | None = None) -> tuple[Tensor, Tensor]:
    """Piecewise-linear CDF per coordinate.

    ``u`` has shape (..., t) in (0, 1); ``bin_probs`` (..., t, B) sums to one
    over the last axis. Returns the transformed coordinates and the log
    Jacobian determinant summed over the t coordinates.
    """
    u = _clamp_unit(T.as_tensor(u), counter)
    q = T.as_tensor(bin_probs)
    nb = q.shape[-1]
    scaled = u * float(nb)
    k = np.clip(np.floor(scaled.data), 0, nb - 1).astype(np.int64)
    q_k = T.gather_last(q, k)
    left = T.gather_last(T.cumsum(q, axis=-1, exclusive=True), k)
    out = left + (scaled - k.astype(float)) * q_k
    log_det = T.tsum(T.log(q_k * float(nb)), axis=-1)
    return out, log_det


def pwl_inverse(y, bin_probs, counter: dict | None = None) -> tuple[Tensor, Tensor]:
    """Exact inverse of :func:`pwl_forward`; the log-det is the forward one negated."""
    y = _clamp_unit(T.as_tensor(y), counter)
    q = T.as_tensor(bin_probs)
    nb = q.shape[-1]
    left_all = T.cumsum(q, axis=-1, exclusive=True)
    k = np.count_nonzero(left_all.data[..., 1:] <= y.data[..., None], axis=-1)
    q_k = T.gather_last(q, k)
    left = T.gather_last(left_all, k)
    u = (k.astype(float) + (y - left) / q_k) * (1.0 / nb)
    log_det = -T.tsum(T.log(q_k * float(nb)), axis=-1)
    return u, log_det


def _bin_probs(spec: FlowSpec, params, layer: int, u_fixed: Tensor, context: Tensor, prefix: str) -> Tensor:
    lead = u_fixed.shape[:-1]
    ctx = context
    if ctx.shape[:-1] != lead:
        ctx = T.broadcast_to(ctx, lead + (ctx.shape[-1],))
    inp = T.concat([u_fixed, ctx], axis=-1)
    logits = mlp_forward(spec.conditioner(layer), params, inp, f"{prefix}.c{layer}")
    t = len(spec.transformed(layer))
    return T.softmax(T.reshape(logits, lead + (t, spec.bins)), axis=-1)


def _assemble(fixed_idx, fixed: Tensor, moved_idx, moved: Tensor) -> Tensor:
    order = np.argsort(np.concatenate([fixed_idx, moved_idx]))
    return T.concat([fixed, moved], axis=-1)[..., order]


def coupling_forward(spec: FlowSpec, params, layer: int, u: Tensor, context: Tensor,
                     prefix: str = "flow", counter: dict | None = None) -> tuple[Tensor, Tensor]:
    fi, ti = spec.fixed(layer), spec.transformed(layer)
    u_fixed, u_moved = u[..., fi], u[..., ti]
    probs = _bin_probs(spec, params, layer, u_fixed, context, prefix)
    moved, log_det = pwl_forward(u_moved, probs, counter)
    return _assemble(fi, u_fixed, ti, moved), log_det


def coupling_inverse(spec: FlowSpec, params, layer: int, y: Tensor, context: Tensor,
                     prefix: str = "flow", counter: dict | None = None) -> tuple[Tensor, Tensor]:
    fi, ti = spec.fixed(layer), spec.transformed(layer)
    y_fixed, y_moved = y[..., fi], y[..., ti]
    probs = _bin_probs(spec, params, layer, y_fixed, context, prefix)
    moved, log_det = pwl_inverse(y_moved, probs, counter)
    return _assemble(fi, y_fixed, ti, moved), log_det


# ---------------------------------------------------------------- posterior

def _base_log_density(z0: Tensor, base: DiagGaussian) -> Tensor:
    diff = z0 - base.mean
    return T.tsum((diff * diff * T.exp(-base.log_var) + base.log_var + LOG_2PI) * -0.5, axis=-1)


def _log_sigmoid_jacobian(z: Tensor) -> Tensor:
    # log sigmoid'(z) = log sigmoid(z) + log sigmoid(-z)
    return T.tsum(T.log_sigmoid(z) + T.log_sigmoid(-z), axis=-1)


@dataclass
class FlowPosterior:
    """Flow-transformed posterior for a batch of rows.

    ``context`` conditions every coupling (shape (B, C)). Samples may carry an
    extra leading axis (M, B, K) for multi-sample estimates.
    """

    base: DiagGaussian
    context: Tensor
    spec: FlowSpec
    params: Mapping[str, Tensor]
    prefix: str = "flow"
    counter: dict = field(default_factory=dict)

    def sample(self, noise) -> tuple[Tensor, Tensor]:
        """Reparameterised draw and its log density."""
        noise = T.as_tensor(noise)
        z0 = self.base.mean + T.exp(self.base.log_var * 0.5) * noise
        log_q = _base_log_density(z0, self.base)
        if not self.spec.squash:
            return z0, log_q
        log_q = log_q - _log_sigmoid_jacobian(z0)
        u = T.sigmoid(z0)
        for i in range(self.spec.layers):
            u, ld = coupling_forward(self.spec, self.params, i, u, self.context, self.prefix, self.counter)
            if not np.all(np.isfinite(ld.data)):
                raise FlowNumericError(f"non-finite log-det in coupling {i}")
            log_q = log_q - ld
        u = _clamp_unit(u, self.counter)
        z = T.log(u) - T.log(1.0 - u)
        # log|d logit / du| = -log(u (1 - u))
        log_q = log_q + T.tsum(T.log(u) + T.log(1.0 - u), axis=-1)
        return z, log_q

    def log_prob(self, z) -> Tensor:
        """log q(z) evaluated through the inverse chain."""
        z = T.as_tensor(z)
        if not self.spec.squash:
            return _base_log_density(z, self.base)
        u = _clamp_unit(T.sigmoid(z), self.counter)
        log_det = -T.tsum(T.log(u) + T.log(1.0 - u), axis=-1)
        for i in reversed(range(self.spec.layers)):
            u, ld_inv = coupling_inverse(self.spec, self.params, i, u, self.context, self.prefix, self.counter)
            if not np.all(np.isfinite(ld_inv.data)):
                raise FlowNumericError(f"non-finite log-det in inverse coupling {i}")
            log_det = log_det - ld_inv
        u = _clamp_unit(u, self.counter)
        z0 = T.log(u) - T.log(1.0 - u)
        log_det = log_det + _log_sigmoid_jacobian(z0)
        return _base_log_density(z0, self.base) - log_det


def flow_sample_and_logprob(fp: FlowPosterior, noise) -> tuple[Tensor, Tensor]:
    return fp.sample(noise)
