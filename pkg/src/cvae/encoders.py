"""Encoders for partially observed rows and the Gaussian decoder head.

Four encoder kinds share one output convention, a K-dimensional diagonal
Gaussian:

* ``zi`` feeds ``x`` with missing cells set to zero,
* ``mask_zi`` and ``flow_input`` feed ``[x_zi, mask]``,
* ``pnp`` embeds each observed feature, maps it through ``h`` and sum-pools
  before ``g``.

Every function takes a batch of rows ``(B, d)`` together with a boolean
observation mask; values at unobserved cells are never read.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numcore import DiagGaussian, MLPSpec, Tensor, gaussian_log_terms, init_mlp, mlp_forward, parameter
from .numcore import tensor as T
from .numcore.tensor import DimensionError

ENCODER_KINDS = ("zi", "mask_zi", "pnp", "flow_input")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    d: int
    latent: int = 10
    hidden: tuple[int, ...] = (100, 100, 100)
    activation: str = "elu"
    # pnp only
    embed_dim: int = 20
    set_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.latent < 1 or self.d < 1:
            raise ValueError("latent and data dimensions must be positive")

    @property
    def input_width(self) -> int:
        if self.kind == "zi":
            return self.d
        if self.kind == "pnp":
            return self.set_hidden[-1]
        return 2 * self.d

    @property
    def trunk(self) -> MLPSpec:
        # hidden layers only; the last hidden activation doubles as flow context
        sizes = (self.input_width,) + tuple(self.hidden)
        return MLPSpec(sizes, self.activation, self.activation)

    @property
    def head(self) -> MLPSpec:
        return MLPSpec((self.hidden[-1], 2 * self.latent), "identity", "identity")

    @property
    def set_net(self) -> MLPSpec:
        return MLPSpec((self.embed_dim,) + tuple(self.set_hidden), "relu", "relu")

    @property
    def context_width(self) -> int:
        return self.hidden[-1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "latent": self.latent, "hidden": list(self.hidden),
                "activation": self.activation, "embed_dim": self.embed_dim,
                "set_hidden": list(self.set_hidden)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls(d["kind"], d["d"], d["latent"], tuple(d["hidden"]), d["activation"],
                   d["embed_dim"], tuple(d["set_hidden"]))


@dataclass(frozen=True)
class DecoderSpec:
    d: int
    latent: int = 10
    hidden: tuple[int, ...] = (100, 100, 100, 100)
    activation: str = "elu"

    @property
    def mlp(self) -> MLPSpec:
        return MLPSpec((self.latent,) + tuple(self.hidden) + (2 * self.d,), self.activation)

    def to_dict(self) -> dict:
        return {"d": self.d, "latent": self.latent, "hidden": list(self.hidden), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecoderSpec":
        return cls(d["d"], d["latent"], tuple(d["hidden"]), d["activation"])


def init_encoder(spec: EncoderSpec, rng: np.random.Generator, prefix: str = "enc") -> dict[str, Tensor]:
    params = {}
    if spec.kind == "pnp":
        params.update(init_mlp(spec.set_net, rng, f"{prefix}.h"))
        params[f"{prefix}.embed"] = parameter(rng.normal(0.0, 1.0, size=(spec.d, spec.embed_dim)), f"{prefix}.embed")
        params[f"{prefix}.offset"] = parameter(rng.normal(0.0, 0.1, size=(spec.d, spec.embed_dim)), f"{prefix}.offset")
    params.update(init_mlp(spec.trunk, rng, f"{prefix}.trunk"))
    params.update(init_mlp(spec.head, rng, f"{prefix}.head"))
    return params


def init_decoder(spec: DecoderSpec, rng: np.random.Generator, prefix: str = "dec") -> dict[str, Tensor]:
    return init_mlp(spec.mlp, rng, prefix)


def zero_filled(x, mask) -> np.ndarray:
    """Observed values with every unobserved cell replaced by 0."""
    return np.where(mask, x, 0.0)


def _check_width(spec: EncoderSpec, x: np.ndarray, mask: np.ndarray):
    if x.shape[-1] != spec.d or mask.shape != x.shape:
        raise DimensionError(f"encoder built for d={spec.d} got x {x.shape}, mask {mask.shape}")


def pnp_pool(spec: EncoderSpec, params: Mapping[str, Tensor], x, mask, prefix: str = "enc") -> Tensor:
    """sum over observed j of h(x_j * e_j + c_j), shape (B, H)."""
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    xz = zero_filled(x, mask)
    s = T.mul(xz[..., None], params[f"{prefix}.embed"]) + params[f"{prefix}.offset"]
    h = mlp_forward(spec.set_net, params, s, f"{prefix}.h")
    return T.tsum(h * mask[..., None].astype(float), axis=-2)


def encoder_features(spec: EncoderSpec, params: Mapping[str, Tensor], x, mask, prefix: str = "enc") -> Tensor:
    """Last hidden activation of the encoder trunk (the flow context)."""
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    _check_width(spec, x, mask)
    if spec.kind == "zi":
        inp = Tensor(zero_filled(x, mask))
    elif spec.kind == "pnp":
        inp = pnp_pool(spec, params, x, mask, prefix)
    else:
        inp = Tensor(np.concatenate([zero_filled(x, mask), mask.astype(float)], axis=-1))
    return mlp_forward(spec.trunk, params, inp, f"{prefix}.trunk")


def gaussian_from_head(spec: EncoderSpec, params: Mapping[str, Tensor], features: Tensor,
                       prefix: str = "enc") -> DiagGaussian:
    out = mlp_forward(spec.head, params, features, f"{prefix}.head")
    k = spec.latent
    return DiagGaussian(out[..., :k], out[..., k:])


def encode(spec: EncoderSpec, params: Mapping[str, Tensor], x, mask, prefix: str = "enc") -> DiagGaussian:
    """Approximate posterior q(z | x_Q) for each row."""
    return gaussian_from_head(spec, params, encoder_features(spec, params, x, mask, prefix), prefix)


def encode_set(spec: EncoderSpec, params: Mapping[str, Tensor], observed: Sequence[tuple[int, float]],
               prefix: str = "enc") -> DiagGaussian:
    """PNP posterior of a single row given as an unordered collection of (feature, value).

    The collection is canonicalised by feature index before pooling, so any
    presentation order yields the same floating point result.
    """
    if spec.kind != "pnp":
        raise ValueError("encode_set is defined for the pnp encoder only")
    x = np.zeros((1, spec.d))
    mask = np.zeros((1, spec.d), dtype=bool)
    for j, v in sorted(observed, key=lambda jv: jv[0]):
        x[0, j] = v
        mask[0, j] = True
    return encode(spec, params, x, mask, prefix)


def decode(spec: DecoderSpec, params: Mapping[str, Tensor], z, prefix: str = "dec") -> DiagGaussian:
    """p(x | z): sigmoid means in (0, 1) and a learned log-variance per feature."""
    z = T.as_tensor(z)
    if z.shape[-1] != spec.latent:
        raise DimensionError(f"decoder expects latent width {spec.latent}, got {z.shape}")
    out = mlp_forward(spec.mlp, params, z, prefix)
    d = spec.d
    return DiagGaussian(T.sigmoid(out[..., :d]), out[..., d:])


def masked_log_likelihood(like: DiagGaussian, x, mask) -> Tensor:
    """Sum of Gaussian log densities over observed cells only."""
    mask = np.asarray(mask, dtype=bool)
    xz = zero_filled(np.asarray(x, dtype=float), mask)
    terms = gaussian_log_terms(xz, like)
    return T.tsum(terms * mask.astype(float), axis=-1)


@dataclass(frozen=True)
class MaskHeadSpec:
    """Self-masking: pi_j = sigmoid(a_j * (xhat_j - b_j)) is P(feature j observed)."""

    d: int
    init_slope: float = 0.0

    def to_dict(self) -> dict:
        return {"d": self.d, "init_slope": self.init_slope}


def init_mask_head(spec: MaskHeadSpec, column_means: np.ndarray, prefix: str = "mask") -> dict[str, Tensor]:
    return {
        f"{prefix}.a": parameter(np.full(spec.d, spec.init_slope), f"{prefix}.a"),
        f"{prefix}.b": parameter(np.asarray(column_means, dtype=float).copy(), f"{prefix}.b"),
    }


def mask_probabilities(params: Mapping[str, Tensor], x_completed, prefix: str = "mask") -> Tensor:
    return T.sigmoid(params[f"{prefix}.a"] * (T.as_tensor(x_completed) - params[f"{prefix}.b"]))
