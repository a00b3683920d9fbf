"""CSV ingestion, min-max scaling, train/test splitting and mask files."""
from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

BUILTIN_DATASETS = ("housing", "wine", "breast")


class ParseError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleInfo:
    mins: np.ndarray
    maxs: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", self.maxs <= self.mins)

    def scale(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.maxs - self.mins)
        out = (np.asarray(values, dtype=float) - self.mins) / span
        return np.where(self.constant, 0.5, out)

    def unscale(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 0.0, self.maxs - self.mins)
        return np.asarray(values, dtype=float) * span + self.mins

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(),
                "constant": self.constant.astype(bool).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleInfo":
        return cls(np.asarray(d["mins"], float), np.asarray(d["maxs"], float),
                   np.asarray(d["constant"], bool))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ScaleInfo":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Dataset:
    """An ``n x d`` table; ``mask`` marks observed cells (True = observed).

    Unobserved cells of ``values`` hold NaN after loading; downstream code
    never reads them. ``truth`` optionally keeps the complete table for
    evaluation.
    """

    values: np.ndarray
    mask: np.ndarray
    columns: tuple[str, ...]
    scale_info: ScaleInfo | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"dataset must be a non-empty matrix, got shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise DataError(f"mask shape {self.mask.shape} does not match values {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, values=self.values[idx], mask=self.mask[idx],
                       truth=None if self.truth is None else self.truth[idx])


# ---------------------------------------------------------------- CSV

def _parse_lines(lines, source: str, header: bool):
    columns = None
    rows: list[list[float]] = []
    width = None
    line_no = 0
    for raw in lines:
        line_no += 1
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = line.split(",")
        if header and columns is None:
            columns = tuple(c.strip().strip('"') for c in cells)
            width = len(columns)
            continue
        if width is None:
            width = len(cells)
        if len(cells) != width:
            raise ParseError(f"{source}: row at line {line_no} has {len(cells)} fields, expected {width}")
        row = []
        for j, cell in enumerate(cells):
            cell = cell.strip()
            if cell == "":
                row.append(math.nan)
                continue
            try:
                row.append(float(cell))
            except ValueError:
                raise ParseError(f"{source}: non-numeric cell {cell!r} at line {line_no}, column {j}") from None
            if not math.isfinite(row[-1]):
                raise ParseError(f"{source}: non-finite cell {cell!r} at line {line_no}, column {j}")
        rows.append(row)
    if not rows:
        raise ParseError(f"{source}: no data rows")
    values = np.array(rows, dtype=float)
    if columns is None:
        columns = tuple(f"x{j}" for j in range(values.shape[1]))
    return values, columns


def load_csv(path, header: bool = True) -> Dataset:
    """Read a numeric CSV; empty cells become missing (mask False, value NaN)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", newline="") as fh:
        values, columns = _parse_lines(fh, str(path), header)
    mask = ~np.isnan(values)
    return Dataset(values=values, mask=mask, columns=columns)


def load_builtin(name: str) -> Dataset:
    """One of the bundled UCI tables: ``housing``, ``wine`` or ``breast``."""
    if name not in BUILTIN_DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; bundled: {', '.join(BUILTIN_DATASETS)}")
    blob = resources.files("cvae.data").joinpath(f"{name}.csv.gz").read_bytes()
    text = gzip.decompress(blob).decode()
    values, columns = _parse_lines(io.StringIO(text), name, header=True)
    return Dataset(values=values, mask=~np.isnan(values), columns=columns)


def format_number(v: float) -> str:
    if math.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_matrix_csv(matrix, path, columns=None, comment: str | None = None) -> None:
    """Write a numeric matrix; NaN cells are written empty."""
    matrix = np.asarray(matrix, dtype=float)
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    if columns is not None:
        lines.append(",".join(columns))
    for row in matrix:
        lines.append(",".join(format_number(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_mask_csv(mask, path, comment: str | None = None) -> None:
    write_matrix_csv(np.asarray(mask, dtype=bool).astype(int), path, comment=comment)


def read_mask_csv(path) -> np.ndarray:
    """Read a 0/1 mask (1 = observed); anything else is a parse error."""
    rows = []
    width = None
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in raw.split(",")]
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(f"{path}: row at line {line_no} has {len(cells)} fields, expected {width}")
        for j, c in enumerate(cells):
            if c not in ("0", "1"):
                raise ParseError(f"{path}: mask cell {c!r} at line {line_no}, column {j} is not 0/1")
        rows.append([c == "1" for c in cells])
    if not rows:
        raise ParseError(f"{path}: empty mask")
    return np.array(rows, dtype=bool)


# ---------------------------------------------------------------- scaling / splitting

def fit_scale(values: np.ndarray, fit_mask: np.ndarray, columns=None) -> ScaleInfo:
    """Min/max per column over cells where ``fit_mask`` is True."""
    d = values.shape[1]
    mins, maxs, const = np.zeros(d), np.zeros(d), np.zeros(d, bool)
    for j in range(d):
        col = values[fit_mask[:, j], j]
        if col.size == 0:
            name = columns[j] if columns is not None else str(j)
            raise DataError(f"column {name!r} has no observed cells to fit scaling")
        mins[j], maxs[j] = col.min(), col.max()
        const[j] = np.unique(col).size < 2
    return ScaleInfo(mins, maxs, const)


def minmax_scale(ds: Dataset, fit_mask: np.ndarray | None = None) -> tuple[Dataset, ScaleInfo]:
    """Scale to [0, 1] with statistics from observed cells under ``fit_mask``.

    Hidden cells never enter the statistics. Constant columns map to 0.5.
    The ground-truth copy, if present, is scaled with the same statistics.
    """
    fit = ds.mask if fit_mask is None else (np.asarray(fit_mask, bool) & ds.mask)
    info = fit_scale(ds.values, fit, ds.columns)
    scaled = np.where(ds.mask, info.scale(np.where(ds.mask, ds.values, 0.0)), np.nan)
    truth = None if ds.truth is None else info.scale(ds.truth)
    return replace(ds, values=scaled, scale_info=info, truth=truth), info


def split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint (train, test) row indices; test size is round(n * fraction)."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise ConfigError(f"test_fraction {test_fraction} on {n} rows leaves an empty train or test set")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
