"""Fully connected networks on top of the autodiff tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, elu, identity, linear, parameter, relu, sigmoid, tanh

ACTIVATIONS = {
    "elu": elu,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``sizes[0] -> ... -> sizes[-1]`` with one hidden activation."""

    sizes: tuple[int, ...]
    activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MLPSpec":
        return cls(tuple(d["sizes"]), d.get("activation", "elu"), d.get("output_activation", "identity"))


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(spec: MLPSpec, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        params[f"{prefix}.W{i}"] = parameter(glorot_uniform(fan_in, fan_out, rng), f"{prefix}.W{i}")
        params[f"{prefix}.b{i}"] = parameter(np.zeros(fan_out), f"{prefix}.b{i}")
    return params


def mlp_forward(spec: MLPSpec, params: Mapping[str, Tensor], x, prefix: str) -> Tensor:
    """Apply the network to the last axis of ``x`` (any leading batch shape)."""
    h = as_tensor(x)
    act = ACTIVATIONS[spec.activation]
    for i in range(spec.n_layers):
        W = params[f"{prefix}.W{i}"]
        b = params[f"{prefix}.b{i}"]
        if h.shape[-1] != W.shape[0]:
            raise DimensionError(
                f"{prefix}: layer {i} expects width {W.shape[0]}, got input of shape {h.shape}")
        h = linear(h, W, b)
        h = act(h) if i < spec.n_layers - 1 else ACTIVATIONS[spec.output_activation](h)
    return h
