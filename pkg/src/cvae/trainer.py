"""Minibatch training with ADAM for every model family, optionally regularised or with AM."""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .dataio import ConfigError
from .missingness import MECHANISMS, MechanismSpec, am_subset, artificial_subset, column_statistic
from .model import IW_KINDS, MODEL_KINDS, ModelSpec, VAEModel, config_hash
from .numcore import AdamState, adam_step, gradient
from .objectives import LossBreakdown, model_objective, regularized_loss

LOG_COLUMNS = ("epoch", "loss", "elbo_Q", "elbo_P", "kl_QP", "loglik_Pbar", "seconds")
P_RANGE = (0.01, 0.8)


class TrainingError(FloatingPointError):
    """Non-finite loss; carries the step coordinates and last breakdown."""

    def __init__(self, epoch: int, batch: int, components: Mapping[str, float]):
        self.epoch, self.batch, self.components = epoch, batch, dict(components)
        parts = ", ".join(f"{k}={v:.6g}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class RegSettings:
    enabled: bool = False
    lam: float = 1.0
    p_remove: float | None = 0.3
    mechanism: str = "uniform"

    def spec(self) -> MechanismSpec:
        return MechanismSpec(self.mechanism, self.p_remove if self.mechanism == "uniform" else None)


@dataclass(frozen=True)
class AMSettings:
    enabled: bool = False


@dataclass(frozen=True)
class FlowSettings:
    layers: int = 4
    bins: int = 10
    hidden: int = 64


@dataclass(frozen=True)
class ArchSettings:
    enc_hidden: tuple[int, ...] = (100, 100, 100)
    dec_hidden: tuple[int, ...] = (100, 100, 100, 100)
    activation: str = "elu"
    embed_dim: int = 20
    set_hidden: tuple[int, ...] = (64, 64)
    mask_init_slope: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    model: str = "zi"
    epochs: int = 3000
    lr: float = 1e-3
    batch: int = 64
    latent: int = 10
    samples: int = 1
    seed: int = 0
    eval_every: int = 0
    reg: RegSettings = field(default_factory=RegSettings)
    am: AMSettings = field(default_factory=AMSettings)
    flow: FlowSettings = field(default_factory=FlowSettings)
    arch: ArchSettings = field(default_factory=ArchSettings)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: unknown kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        if self.reg.enabled and self.am.enabled:
            raise ConfigError("reg.enabled and am.enabled are mutually exclusive")
        for name in ("epochs", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        for name in ("batch", "latent", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        if self.reg.mechanism not in MECHANISMS:
            raise ConfigError(f"reg.mechanism: unknown {self.reg.mechanism!r}")
        if self.reg.lam < 0:
            raise ConfigError("reg.lam: must be non-negative")
        if self.reg.mechanism == "uniform":
            if self.reg.p_remove is None or not 0.0 <= self.reg.p_remove <= 1.0:
                raise ConfigError("reg.p_remove: must lie in [0, 1]")
        if self.reg.enabled:
            if self.reg.lam > 1.5:
                warnings.warn(f"reg.lam {self.reg.lam} is outside the tuned range [0.01, 1.5]", stacklevel=3)
            p = self.reg.p_remove
            if self.reg.mechanism == "uniform" and not P_RANGE[0] <= p <= P_RANGE[1]:
                warnings.warn(f"reg.p_remove {p} is outside the tuned range [0.01, 0.8]", stacklevel=3)
        if self.model in ("flow", "flow_mnar") and self.flow.layers > 0 and self.latent < 2:
            raise ConfigError("latent: flow models need at least 2 latent dimensions")

    @property
    def n_samples(self) -> int:
        """Latent samples per row and step (importance samples for IW kinds, else 1)."""
        return self.samples if self.model in IW_KINDS else 1

    def model_spec(self, d: int) -> ModelSpec:
        a = self.arch
        return ModelSpec(self.model, d, self.latent, tuple(a.enc_hidden), tuple(a.dec_hidden), a.activation,
                         a.embed_dim, tuple(a.set_hidden), self.flow.layers, self.flow.bins, self.flow.hidden,
                         a.mask_init_slope)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return list(v)
            return v

        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {k: conv(x) for k, x in asdict(v).items()} if is_dataclass(v) else v
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping, path: str = "") -> "TrainConfig":
        return _build(cls, d, path)


def _coerce(tp, value, path: str):
    tp = str(tp)
    if tp == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp in ("float", "float | None"):
        if value is None and "None" in tp:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"{path}: expected a list of positive integers, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, d: Mapping, path: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected a table, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in d.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        f = known[key]
        sub = _SECTIONS.get(key) if cls is TrainConfig else None
        kwargs[key] = _build(sub, value, where) if sub else _coerce(f.type, value, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


_SECTIONS = {"reg": RegSettings, "am": AMSettings, "flow": FlowSettings, "arch": ArchSettings}


# ---------------------------------------------------------------- training log

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def append(self, rec: dict) -> None:
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be logged in increasing order")
        self.records.append(rec)

    def to_csv(self, header_comment: str | None = None, timing: bool = True) -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            row = []
            for col in LOG_COLUMNS:
                v = r.get(col)
                if col == "seconds" and not timing:
                    v = None
                if v is None:
                    row.append("")
                elif col == "epoch":
                    row.append(str(v))
                else:
                    row.append(repr(float(v)))
            w.writerow(row)
        return buf.getvalue()

    def save(self, path, header_comment: str | None = None, timing: bool = True) -> None:
        Path(path).write_text(self.to_csv(header_comment, timing))


# ---------------------------------------------------------------- batching

def minibatch_iter(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the final short batch is kept."""
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def train_am_step(q_mask: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Artificial missingness: drop observed cells at a rate drawn from U(0, 0.7)."""
    return am_subset(np.asarray(q_mask, dtype=bool), rng)


def draw_noise(rng: np.random.Generator, n_samples: int, rows: int, latent: int, iw: bool) -> np.ndarray:
    return rng.standard_normal((n_samples, rows, latent)) if iw else rng.standard_normal((rows, latent))


# ---------------------------------------------------------------- main loop

def _observed_column_means(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    means = column_statistic(values, mask, "mean")
    return np.where(np.isfinite(means), means, 0.5)


def step_loss(cfg: TrainConfig, model: VAEModel, xb: np.ndarray, qb: np.ndarray, rng: np.random.Generator,
              column_stats: np.ndarray | None = None) -> LossBreakdown:
    """Batch-mean objective (to be maximised) for one training step."""
    iw = model.kind in IW_KINDS
    M, K = cfg.n_samples, cfg.latent
    if cfg.am.enabled:
        qb, _ = train_am_step(qb, rng)
    if cfg.reg.enabled:
        pb = artificial_subset(qb, xb, cfg.reg.spec(), rng, column_stats)
        noise_q = draw_noise(rng, M, len(xb), K, iw)
        noise_p = draw_noise(rng, M, len(xb), K, iw)
        return regularized_loss(model, xb, qb, pb, cfg.reg.lam, noise_q, noise_p).mean()
    noise = draw_noise(rng, M, len(xb), K, iw)
    return model_objective(model, xb, qb, noise).mean()


def train(cfg: TrainConfig, values: np.ndarray, q_mask: np.ndarray | None = None, scale_info=None,
          on_checkpoint: Callable[[int, VAEModel], None] | None = None,
          verbose: Callable[[str], None] | None = None) -> tuple[VAEModel, TrainLog]:
    """Fit a model to scaled ``values`` (n x d) observed where ``q_mask`` is True."""
    values = np.asarray(values, dtype=float)
    q_mask = ~np.isnan(values) if q_mask is None else np.asarray(q_mask, dtype=bool)
    if q_mask.shape != values.shape:
        raise ConfigError(f"mask shape {q_mask.shape} does not match data {values.shape}")
    x = np.where(q_mask, values, 0.0)
    if np.isnan(x).any():
        raise ConfigError("observed cells contain NaN")
    n, d = x.shape

    init_rng = np.random.default_rng([cfg.seed, 0])
    step_rng = np.random.default_rng([cfg.seed, 2])
    model = VAEModel.init(cfg.model_spec(d), init_rng, _observed_column_means(x, q_mask), scale_info)
    state = AdamState(lr=cfg.lr)
    stats = None
    if cfg.reg.enabled and cfg.reg.spec().statistic is not None:
        stats = column_statistic(x, q_mask, cfg.reg.spec().statistic)

    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        for b, idx in enumerate(minibatch_iter(n, cfg.batch, cfg.seed, epoch)):
            bd = step_loss(cfg, model, x[idx], q_mask[idx], step_rng, stats)
            vals = bd.values()
            if not math.isfinite(vals["total"]):
                raise TrainingError(epoch, b, vals)
            grads = gradient(-bd.total, model.params)
            adam_step(state, model.params, grads)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        rec = {"epoch": epoch, "loss": -sums["total"] / n, "seconds": time.perf_counter() - t0}
        for k in ("elbo_Q", "elbo_P", "kl_QP", "loglik_Pbar"):
            rec[k] = sums[k] / n if k in sums else None
        log.append(rec)
        if verbose is not None:
            verbose(f"epoch {epoch}: loss {rec['loss']:.4f}")
        if on_checkpoint is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            on_checkpoint(epoch, model)
    return model, log
