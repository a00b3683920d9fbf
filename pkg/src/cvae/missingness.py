"""Observation masks: true missingness and artificial subsets P of Q.

Masks are boolean arrays with True = observed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MECHANISMS = (
    "uniform",
    "half_feature_mean",
    "all_feature_mean",
    "half_feature_variance",
    "all_feature_variance",
)
AM_MAX_RATE = 0.7


@dataclass(frozen=True)
class MechanismSpec:
    kind: str = "uniform"
    p_remove: float | None = 0.3

    def __post_init__(self):
        if self.kind not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.kind!r}; choose from {', '.join(MECHANISMS)}")
        if self.kind == "uniform":
            if self.p_remove is None or not 0.0 <= self.p_remove <= 1.0:
                raise ValueError(f"uniform mechanism needs p_remove in [0, 1], got {self.p_remove}")
        elif self.p_remove is not None:
            raise ValueError(f"{self.kind} is deterministic and takes no p_remove")

    @property
    def statistic(self) -> str | None:
        if self.kind.endswith("_mean"):
            return "mean"
        if self.kind.endswith("_variance"):
            return "variance"
        return None


def sample_mcar_mask(n: int, d: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Each cell independently missing with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")
    return rng.random((n, d)) >= rate


def self_censoring_mask(values: np.ndarray) -> np.ndarray:
    """Hide a cell when its value is strictly above its column mean."""
    values = np.asarray(values, dtype=float)
    return ~(values > values.mean(axis=0, keepdims=True))


def first_half_columns(d: int) -> np.ndarray:
    return np.arange(math.ceil(d / 2))


def column_statistic(values: np.ndarray, q_mask: np.ndarray, statistic: str) -> np.ndarray:
    """Per-column mean or variance over observed cells (NaN where none observed)."""
    vals = np.where(q_mask, values, 0.0)
    counts = q_mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=0) / counts
        if statistic == "mean":
            return mean
        sq = np.where(q_mask, (values - mean) ** 2, 0.0).sum(axis=0)
        return sq / counts


def artificial_subset(q_mask: np.ndarray, values: np.ndarray, spec: MechanismSpec,
                      rng: np.random.Generator, column_stats: np.ndarray | None = None) -> np.ndarray:
    """Draw P with P ⊆ Q.

    ``uniform`` drops every observed cell independently with ``p_remove``.
    The mean/variance kinds drop an observed cell when its value exceeds the
    column statistic; ``column_stats`` lets the caller supply statistics fit on
    the whole training table, otherwise they come from ``values``/``q_mask``.
    """
    q_mask = np.asarray(q_mask, dtype=bool)
    if spec.kind == "uniform":
        drop = rng.random(q_mask.shape) < spec.p_remove
        return q_mask & ~drop
    if column_stats is None:
        column_stats = column_statistic(values, q_mask, spec.statistic)
    d = q_mask.shape[1]
    cols = first_half_columns(d) if spec.kind.startswith("half") else np.arange(d)
    filled = np.where(q_mask, values, -np.inf)
    drop = np.zeros_like(q_mask)
    drop[:, cols] = filled[:, cols] > column_stats[cols]
    return q_mask & ~drop


def am_rate(rng: np.random.Generator) -> float:
    """Artificial-missingness rate drawn from U(0, 0.7)."""
    return float(rng.uniform(0.0, AM_MAX_RATE))


def am_subset(q_mask: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Drop observed cells at a freshly drawn rate; returns (reduced mask, rate)."""
    rate = am_rate(rng)
    return q_mask & ~(rng.random(q_mask.shape) < rate), rate
