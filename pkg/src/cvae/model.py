"""Model bundles (encoder, decoder, optional flow and mask head) and checkpoints."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataio import ScaleInfo
from .encoders import (
    DecoderSpec,
    EncoderSpec,
    MaskHeadSpec,
    decode,
    encoder_features,
    gaussian_from_head,
    init_decoder,
    init_encoder,
    init_mask_head,
    mask_probabilities,
)
from .flows import FlowPosterior, FlowSpec, init_flow
from .numcore import DiagGaussian, Tensor, gaussian_log_density, parameter
from .numcore import tensor as T

MODEL_KINDS = ("zi", "mask_zi", "pnp", "flow", "miwae", "not_miwae", "flow_mnar")
ENCODER_FOR_KIND = {
    "zi": "zi",
    "mask_zi": "mask_zi",
    "pnp": "pnp",
    "flow": "flow_input",
    "miwae": "zi",
    "not_miwae": "zi",
    "flow_mnar": "flow_input",
}
IW_KINDS = ("miwae", "not_miwae")
FLOW_KINDS = ("flow", "flow_mnar")
MASK_KINDS = ("not_miwae", "flow_mnar")

CHECKPOINT_MAGIC = "CVAE-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d: int
    latent: int = 10
    enc_hidden: tuple[int, ...] = (100, 100, 100)
    dec_hidden: tuple[int, ...] = (100, 100, 100, 100)
    activation: str = "elu"
    embed_dim: int = 20
    set_hidden: tuple[int, ...] = (64, 64)
    flow_layers: int = 4
    flow_bins: int = 10
    flow_hidden: int = 64
    mask_init_slope: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {', '.join(MODEL_KINDS)}")

    @property
    def encoder(self) -> EncoderSpec:
        return EncoderSpec(ENCODER_FOR_KIND[self.kind], self.d, self.latent, self.enc_hidden,
                           self.activation, self.embed_dim, self.set_hidden)

    @property
    def decoder(self) -> DecoderSpec:
        return DecoderSpec(self.d, self.latent, self.dec_hidden, self.activation)

    @property
    def flow(self) -> FlowSpec | None:
        if self.kind not in FLOW_KINDS:
            return None
        return FlowSpec(self.latent, self.encoder.context_width, self.flow_layers, self.flow_bins,
                        self.flow_hidden, squash=True)

    @property
    def mask_head(self) -> MaskHeadSpec | None:
        return MaskHeadSpec(self.d, self.mask_init_slope) if self.kind in MASK_KINDS else None

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian posterior with the same interface as :class:`FlowPosterior`."""

    base: DiagGaussian

    def sample(self, noise) -> tuple[Tensor, Tensor]:
        z = self.base.mean + T.exp(self.base.log_var * 0.5) * T.as_tensor(noise)
        return z, gaussian_log_density(z, self.base)

    def log_prob(self, z) -> Tensor:
        return gaussian_log_density(z, self.base)


class VAEModel:
    """Parameters plus the spec needed to run them."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], scale_info: ScaleInfo | None = None):
        self.spec = spec
        self.params = params
        self.scale_info = scale_info

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator, column_means=None,
             scale_info: ScaleInfo | None = None) -> "VAEModel":
        params = init_encoder(spec.encoder, rng, "enc")
        params.update(init_decoder(spec.decoder, rng, "dec"))
        if spec.flow is not None:
            params.update(init_flow(spec.flow, rng, "flow"))
        if spec.mask_head is not None:
            means = np.full(spec.d, 0.5) if column_means is None else column_means
            params.update(init_mask_head(spec.mask_head, means, "mask"))
        return cls(spec, params, scale_info)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def is_flow(self) -> bool:
        return self.spec.kind in FLOW_KINDS

    @property
    def has_mask_head(self) -> bool:
        return self.spec.kind in MASK_KINDS

    def posterior(self, x, mask):
        enc = self.spec.encoder
        feats = encoder_features(enc, self.params, x, mask, "enc")
        base = gaussian_from_head(enc, self.params, feats, "enc")
        if self.is_flow:
            return FlowPosterior(base, feats, self.spec.flow, self.params, "flow")
        return GaussianPosterior(base)

    def decode(self, z) -> DiagGaussian:
        return decode(self.spec.decoder, self.params, z, "dec")

    def mask_probs(self, x_completed) -> Tensor:
        return mask_probabilities(self.params, x_completed, "mask")

    def copy(self) -> "VAEModel":
        return VAEModel(self.spec, {k: parameter(v.data.copy(), k) for k, v in self.params.items()},
                        self.scale_info)

    # ------------------------------------------------------------ checkpoints

    def to_document(self, config_hash: str = "", seed: int | None = None) -> dict:
        params = {}
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            params[name] = {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}
        return {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "seed": seed,
            "spec": self.spec.to_dict(),
            "scale_info": None if self.scale_info is None else self.scale_info.to_dict(),
            "params": params,
        }

    def to_bytes(self, config_hash: str = "", seed: int | None = None) -> bytes:
        return (json.dumps(self.to_document(config_hash, seed), sort_keys=True, indent=1) + "\n").encode()

    def save(self, path, config_hash: str = "", seed: int | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(config_hash, seed))

    @classmethod
    def from_document(cls, doc: Mapping) -> "VAEModel":
        if doc.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("not a model checkpoint (magic string missing)")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
        spec = ModelSpec.from_dict(doc["spec"])
        params = {}
        for name, rec in doc["params"].items():
            arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").reshape(rec["shape"])
            params[name] = parameter(arr.astype(np.float64), name)
        info = None if doc.get("scale_info") is None else ScaleInfo.from_dict(doc["scale_info"])
        return cls(spec, params, info)

    @classmethod
    def load(cls, path) -> "VAEModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
        return cls.from_document(doc)


def config_hash(document: Mapping) -> str:
    """Short stable digest of a JSON-serialisable configuration."""
    blob = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
