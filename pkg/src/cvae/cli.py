"""Command line interface: ``cvae genmask | train | eval | impute | ic``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import click
import numpy as np

from . import acquisition, evalkit
from .dataio import (
    BUILTIN_DATASETS,
    ConfigError,
    DataError,
    Dataset,
    ParseError,
    load_builtin,
    load_csv,
    minmax_scale,
    read_mask_csv,
    write_mask_csv,
    write_matrix_csv,
)
from .flows import FlowNumericError
from .missingness import sample_mcar_mask, self_censoring_mask
from .model import CheckpointError, VAEModel, config_hash
from .numcore import OptimizerError
from .trainer import TrainConfig, TrainingError, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_USAGE = 2
EXIT_NUMERIC = 3
RUN_KEYS = ("data", "mask", "out_dir", "header")
METRICS = ("rmse", "nll", "elbo")


class UsageFailure(click.ClickException):
    exit_code = EXIT_USAGE


class NumericFailure(click.ClickException):
    exit_code = EXIT_NUMERIC


# ---------------------------------------------------------------- helpers

def _load_table(source: str, header: bool = True) -> Dataset:
    try:
        if Path(source).exists():
            return load_csv(source, header=header)
        if source in BUILTIN_DATASETS:
            return load_builtin(source)
    except (ParseError, DataError, ConfigError) as exc:
        raise UsageFailure(str(exc)) from None
    raise UsageFailure(f"data {source!r} is neither a file nor a bundled dataset ({', '.join(BUILTIN_DATASETS)})")


def _load_mask(path: str | None, ds: Dataset) -> np.ndarray:
    if path is None:
        return ds.mask
    try:
        mask = read_mask_csv(path)
    except (ParseError, OSError) as exc:
        raise UsageFailure(str(exc)) from None
    if mask.shape != ds.values.shape:
        raise UsageFailure(f"mask shape {mask.shape} does not match data {ds.values.shape}")
    if np.any(mask & ~ds.mask):
        raise UsageFailure("mask marks cells as observed that are empty in the data file")
    return mask


def _provenance(chash: str, seed) -> str:
    return f"config_hash={chash} seed={seed}"


def read_config(path) -> tuple[TrainConfig, dict]:
    """Parse a TOML or JSON run configuration into (TrainConfig, run section)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    doc = dict(doc)
    run = doc.pop("run", {})
    if not isinstance(run, dict):
        raise ConfigError("run: expected a table")
    for key in run:
        if key not in RUN_KEYS:
            raise ConfigError(f"run.{key}: unknown key")
    cfg = TrainConfig.from_dict(doc)
    env_seed = os.environ.get("CVAE_SEED")
    if env_seed is not None:
        try:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": int(env_seed)})
        except ValueError:
            raise ConfigError(f"CVAE_SEED must be an integer, got {env_seed!r}") from None
    return cfg, run


def _load_model(path: str) -> VAEModel:
    try:
        return VAEModel.load(path)
    except (CheckpointError, OSError, KeyError) as exc:
        raise UsageFailure(f"cannot load model {path}: {exc}") from None


def _model_provenance(path: str) -> tuple[str, object]:
    doc = json.loads(Path(path).read_text())
    return doc.get("config_hash", ""), doc.get("seed")


# ---------------------------------------------------------------- commands

@click.group()
def main():
    """Train and evaluate VAEs on tabular data with missing values."""


@main.command("genmask")
@click.option("--data", "data", required=True, help="CSV file or bundled dataset name.")
@click.option("--mechanism", type=click.Choice(["mcar", "self-censor"]), default="mcar", show_default=True)
@click.option("--rate", type=float, default=0.3, show_default=True, help="Missing rate for mcar.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--no-header", is_flag=True, help="The data file has no header row.")
def cmd_genmask(data, mechanism, rate, seed, out, no_header):
    """Write a 0/1 observation mask (1 = observed)."""
    if not 0.0 <= rate <= 1.0:
        raise UsageFailure(f"--rate must lie in [0, 1], got {rate}")
    ds = _load_table(data, header=not no_header)
    if not ds.mask.all():
        raise UsageFailure("genmask needs a complete data table")
    if mechanism == "mcar":
        mask = sample_mcar_mask(ds.n, ds.d, rate, np.random.default_rng(seed))
    else:
        mask = self_censoring_mask(ds.values)
    chash = config_hash({"mechanism": mechanism, "rate": rate if mechanism == "mcar" else None, "data": data})
    write_mask_csv(mask, out, comment=_provenance(chash, seed))
    click.echo(f"missing fraction {1.0 - mask.mean():.6f}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data", default=None, help="CSV file or bundled dataset name (overrides run.data).")
@click.option("--mask", "mask_path", default=None, help="0/1 mask CSV (overrides run.mask).")
@click.option("--out-dir", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--no-timing", is_flag=True, help="Leave the seconds column empty (reproducible logs).")
@click.option("--quiet", is_flag=True)
def cmd_train(config_path, data, mask_path, out_dir, no_timing, quiet):
    """Train a model; writes model.json and train_log.csv."""
    try:
        cfg, run = read_config(config_path)
    except ConfigError as exc:
        raise UsageFailure(str(exc)) from None
    data = data or run.get("data")
    mask_path = mask_path or run.get("mask")
    out_dir = out_dir or run.get("out_dir")
    if not data or not out_dir:
        raise UsageFailure("both data and out-dir are required (flags or [run] table)")
    ds = _load_table(data, header=run.get("header", True))
    mask = _load_mask(mask_path, ds)
    try:
        scaled, info = minmax_scale(Dataset(np.where(mask, ds.values, np.nan), mask, ds.columns))
    except DataError as exc:
        raise UsageFailure(str(exc)) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    prov = _provenance(chash, cfg.seed)

    def checkpoint(epoch, model):
        model.save(out / f"checkpoint_epoch{epoch}.json", chash, cfg.seed)

    echo = None if quiet else (lambda s: click.echo(s, err=True))
    try:
        model, log = train(cfg, scaled.values, mask, info, on_checkpoint=checkpoint, verbose=echo)
    except (TrainingError, OptimizerError, FlowNumericError, FloatingPointError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    model.save(out / "model.json", chash, cfg.seed)
    log.checkpoint = str(out / "model.json")
    log.save(out / "train_log.csv", prov, timing=not no_timing)
    info.save(out / "scale.json")
    (out / "config.json").write_text(json.dumps({"config_hash": chash, "seed": cfg.seed, **cfg.to_dict()},
                                                indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {out / 'model.json'}")


def _scaled_inputs(model: VAEModel, ds: Dataset, mask: np.ndarray) -> np.ndarray:
    if model.scale_info is None:
        return np.where(mask, ds.values, 0.0)
    if model.scale_info.mins.shape[0] != ds.d:
        raise UsageFailure(f"model expects {model.scale_info.mins.shape[0]} columns, data has {ds.d}")
    return np.where(mask, model.scale_info.scale(np.where(mask, ds.values, 0.0)), 0.0)


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data", required=True)
@click.option("--mask", "mask_path", default=None)
@click.option("--truth", "truth", default=None, help="Complete CSV with ground truth for rmse/nll.")
@click.option("--metrics", default="rmse,nll,elbo", show_default=True)
@click.option("--samples", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dataset-name", default="", help="Label for the dataset column.")
@click.option("--results", default=None, type=click.Path(dir_okay=False), help="Append the row to this CSV.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Accepted for compatibility; rows run serially.")
def cmd_eval(model_path, data, mask_path, truth, metrics, samples, seed, dataset_name, results, jobs):
    """Compute RMSE, negative expected log-likelihood and test ELBO."""
    wanted = [m.strip() for m in metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in METRICS:
            raise UsageFailure(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
    if samples < 1:
        raise UsageFailure("--samples must be positive")
    model = _load_model(model_path)
    ds = _load_table(data)
    mask = _load_mask(mask_path, ds)
    x = _scaled_inputs(model, ds, mask)
    truth_scaled = None
    if {"rmse", "nll"} & set(wanted):
        if truth is None:
            raise UsageFailure("--truth is required for rmse and nll")
        t = _load_table(truth)
        if t.values.shape != ds.values.shape or not t.mask.all():
            raise UsageFailure("truth must be a complete table shaped like the data")
        truth_scaled = t.values if model.scale_info is None else model.scale_info.scale(t.values)
    chash, mseed = _model_provenance(model_path)
    rec = evalkit.MetricsRecord(dataset=dataset_name, model=model.kind, seed=seed,
                                missing_rate=float(1.0 - mask.mean()))
    cfg_path = Path(model_path).with_name("config.json")
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        reg = cfg.get("reg", {})
        rec.reg = bool(reg.get("enabled", False))
        if rec.reg:
            rec.lam, rec.p_remove = reg.get("lam"), reg.get("p_remove")
    if "rmse" in wanted:
        imp = evalkit.impute(model, x, mask, samples, np.random.default_rng(seed))
        rec.rmse = evalkit.rmse_missing(imp, truth_scaled, mask)
    if "nll" in wanted:
        rec.neg_llh = evalkit.neg_expected_llh(model, truth_scaled, mask, samples, np.random.default_rng(seed))
    if "elbo" in wanted:
        rec.elbo = evalkit.test_elbo(model, x, mask, samples, np.random.default_rng(seed))
    row = rec.row()
    click.echo(f"# {_provenance(chash, mseed)}")
    click.echo(",".join(row))
    click.echo(",".join(evalkit._fmt(v) for v in row.values()))
    if results:
        evalkit.append_results(results, rec, _provenance(chash, mseed))


@main.command("impute")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data", required=True)
@click.option("--mask", "mask_path", default=None)
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--samples", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_impute(model_path, data, mask_path, out, samples, seed):
    """Fill missing cells; observed cells are copied unchanged."""
    if samples < 1:
        raise UsageFailure("--samples must be positive")
    model = _load_model(model_path)
    ds = _load_table(data)
    mask = _load_mask(mask_path, ds)
    x = _scaled_inputs(model, ds, mask)
    imp = evalkit.impute(model, x, mask, samples, np.random.default_rng(seed))
    raw = imp if model.scale_info is None else model.scale_info.unscale(imp)
    filled = np.where(mask, ds.values, raw)
    chash, mseed = _model_provenance(model_path)
    write_matrix_csv(filled, out, ds.columns, comment=_provenance(chash, mseed))


@main.command("ic")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data", required=True, help="Complete rows (ground truth) to acquire from.")
@click.option("--target-col", type=int, required=True)
@click.option("--steps", type=int, default=None, help="Acquisition steps (default: all features).")
@click.option("--samples", type=int, default=100, show_default=True, help="Posterior samples for prediction.")
@click.option("--outer-samples", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--svg", "svg", default=None, type=click.Path(dir_okay=False))
@click.option("--overlay", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Further IC CSVs drawn in the same SVG.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Accepted for compatibility; rows run serially.")
def cmd_ic(model_path, data, target_col, steps, samples, outer_samples, seed, out, svg, overlay, jobs):
    """Greedy information curve for one target column."""
    model = _load_model(model_path)
    ds = _load_table(data)
    if not 0 <= target_col < ds.d:
        raise UsageFailure(f"--target-col {target_col} out of range for {ds.d} columns")
    if not ds.mask.all():
        raise UsageFailure("ic needs complete rows")
    steps = ds.d - 1 if steps is None else steps
    if not 0 <= steps <= ds.d - 1:
        raise UsageFailure(f"--steps must lie in [0, {ds.d - 1}]")
    truth = ds.values if model.scale_info is None else model.scale_info.scale(ds.values)
    curve = acquisition.information_curve(model, truth, target_col, steps, outer_samples, samples, seed)
    chash, mseed = _model_provenance(model_path)
    prov = _provenance(chash, mseed)
    Path(out).write_text(curve.to_csv(prov))
    if svg:
        series = [(Path(out).stem, curve.mse)]
        for path in overlay:
            series.append((Path(path).stem, read_ic_csv(path)))
        Path(svg).write_text(render_svg(series, prov))


# ---------------------------------------------------------------- plotting

def read_ic_csv(path) -> np.ndarray:
    vals = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("step"):
            continue
        vals.append(float(line.split(",")[1]))
    return np.array(vals)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def render_svg(series, comment: str = "", width: int = 480, height: int = 320) -> str:
    """Minimal line chart: one polyline per (label, values) series."""
    left, right, top, bottom = 60, 20, 20, 45
    n_max = max(len(v) for _, v in series)
    y_all = np.concatenate([np.asarray(v, float) for _, v in series])
    y_lo, y_hi = float(y_all.min()), float(y_all.max())
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(i):
        return left + (pw * i / (n_max - 1) if n_max > 1 else pw / 2)

    def py(v):
        return top + ph * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
    ]
    if comment:
        parts.append(f"<!-- {escape(comment)} -->")
    parts.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">steps</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 14 {top + ph / 2:.1f})">error</text>')
    for frac in (0.0, 0.5, 1.0):
        v = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{left - 4}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    for i in range(n_max):
        parts.append(f'<text x="{px(i):.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{i}</text>')
    for k, (label, values) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(i):.2f},{py(float(v)):.2f}" for i, v in enumerate(values))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                     f"<title>{escape(label)}</title></polyline>")
        parts.append(f'<text x="{left + pw - 4}" y="{top + 12 + 14 * k}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


if __name__ == "__main__":
    main()
