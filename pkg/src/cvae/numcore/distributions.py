"""Diagonal Gaussian and Bernoulli building blocks.

All densities reduce over the last axis, so a batch of rows of shape
``(B, D)`` yields ``(B,)`` values and a single row yields a scalar.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, clip, exp, log, tsum

LOG_VAR_MIN = -12.0
LOG_VAR_MAX = 12.0
PROB_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Axis-aligned Gaussian; ``log_var`` is clamped to [-12, 12] on construction."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = clip(as_tensor(self.log_var), LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())


def _check(a_shape, b_shape, what: str):
    if a_shape[-1:] != b_shape[-1:]:
        raise DimensionError(f"{what}: dimension {a_shape} vs {b_shape}")


def reparam_sample(q: DiagGaussian, noise) -> Tensor:
    """mean + exp(log_var / 2) * noise."""
    noise = as_tensor(noise)
    _check(q.mean.shape, noise.shape, "reparam_sample")
    return q.mean + exp(q.log_var * 0.5) * noise


def diag_gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in nats, closed form."""
    _check(q.mean.shape, p.mean.shape, "diag_gaussian_kl")
    diff = q.mean - p.mean
    ratio = exp(q.log_var - p.log_var)
    terms = p.log_var - q.log_var + ratio + diff * diff * exp(-p.log_var) - 1.0
    return tsum(terms, axis=-1) * 0.5


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)); same value as :func:`diag_gaussian_kl` against a standard normal."""
    terms = exp(q.log_var) + q.mean * q.mean - 1.0 - q.log_var
    return tsum(terms, axis=-1) * 0.5


def gaussian_log_terms(x, like: DiagGaussian) -> Tensor:
    """Per-coordinate normal log densities (no reduction)."""
    x = as_tensor(x)
    _check(x.shape, like.mean.shape, "gaussian_log_density")
    diff = x - like.mean
    return (diff * diff * exp(-like.log_var) + like.log_var + LOG_2PI) * -0.5


def gaussian_log_density(x, like: DiagGaussian) -> Tensor:
    return tsum(gaussian_log_terms(x, like), axis=-1)


def standard_normal_log_density(z) -> Tensor:
    z = as_tensor(z)
    return tsum((z * z + LOG_2PI) * -0.5, axis=-1)


def bernoulli_log_mass(m, pi) -> Tensor:
    """sum_j m_j log pi_j + (1 - m_j) log(1 - pi_j), pi clamped to [1e-6, 1 - 1e-6]."""
    m, pi = as_tensor(m), as_tensor(pi)
    if m.shape[-1:] != pi.shape[-1:]:
        raise DimensionError(f"bernoulli_log_mass: mask {m.shape} vs probabilities {pi.shape}")
    pi = clip(pi, PROB_EPS, 1.0 - PROB_EPS)
    return tsum(m * log(pi) + (1.0 - m) * log(1.0 - pi), axis=-1)
