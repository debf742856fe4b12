"""Tabular regression data: CSV ingestion, train/test splits, standardization."""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATA_DIR_ENV = "DETVI_DATA_DIR"
PACKAGE_DATA = Path(__file__).resolve().parent / "data"
DEFAULT_REGISTRY = PACKAGE_DATA / "registry.json"


class DatasetError(ValueError):
    """Malformed or missing dataset."""


@dataclass
class Dataset:
    """Features ``(N, d_x)`` and targets ``(N,)``.

    After :func:`split` both parts are standardized with training statistics,
    which are kept in the ``feature_*`` and ``target_*`` fields.
    """

    features: np.ndarray
    targets: np.ndarray
    name: str = ""
    feature_mean: np.ndarray = None
    feature_std: np.ndarray = None
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d_x(self):
        return self.features.shape[1]


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, name=None):
    """Read a numeric CSV whose last column is the target.

    A first row with any non-numeric cell is treated as a header.  Constant
    feature columns are dropped with a warning.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
        first_line = 2
    else:
        first_line = 1
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise DatasetError(f"{path}: need at least one feature and a target column")
    data = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DatasetError(f"{path}: line {r + first_line} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: line {r + first_line}, column {c + 1}: cannot parse {cell!r}") from None
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise DatasetError(f"{path}: line {r + first_line}, column {c + 1}: non-finite value")
    features, targets = data[:, :-1], data[:, -1]
    constant = np.ptp(features, axis=0) == 0
    if np.any(constant):
        log.warning("%s: dropping constant feature columns %s", path, list(np.flatnonzero(constant) + 1))
        features = features[:, ~constant]
    if features.shape[1] == 0:
        raise DatasetError(f"{path}: every feature column is constant")
    ds = Dataset(features, targets, name or path.stem)
    log.info("loaded %s: %d rows, %d features", ds.name, ds.n, ds.d_x)
    return ds


def split(dataset, seed, train_fraction=0.9):
    """Seeded random split; both parts standardized with training statistics."""
    n = dataset.n
    if n < 10:
        raise DatasetError("need at least 10 rows to split")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(math.ceil(train_fraction * n), n - 1)
    tr, te = perm[:n_train], perm[n_train:]
    x_tr, y_tr = dataset.features[tr], dataset.targets[tr]
    f_mean = x_tr.mean(axis=0)
    f_std = x_tr.std(axis=0)
    f_std = np.where(f_std > 0, f_std, 1.0)
    t_mean = float(y_tr.mean())
    t_std = float(y_tr.std())
    if not t_std > 0:
        t_std = 1.0

    def part(idx):
        return replace(
            dataset,
            features=(dataset.features[idx] - f_mean) / f_std,
            targets=(dataset.targets[idx] - t_mean) / t_std,
            feature_mean=f_mean,
            feature_std=f_std,
            target_mean=t_mean,
            target_std=t_std,
        )

    return part(tr), part(te)


def destandardize_ll(ll_standardized, sigma_y):
    """Convert a log-density of standardized targets to original units."""
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    return ll_standardized - math.log(sigma_y)


def load_registry(path=None):
    """Name -> absolute path mapping; relative paths resolve against the registry's folder."""
    path = Path(path) if path is not None else DEFAULT_REGISTRY
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, dict):
        raise DatasetError(f"{path}: registry must be a JSON object")
    return {name: str((path.parent / rel).resolve()) for name, rel in entries.items()}


def resolve(name_or_path, registry_path=None):
    """Locate a dataset by file path, registry name, or ``$DETVI_DATA_DIR/<name>.csv``."""
    candidate = Path(name_or_path)
    if candidate.suffix and candidate.exists():
        return candidate
    env_dir = os.environ.get(DATA_DIR_ENV)
    if env_dir:
        env_path = Path(env_dir) / f"{name_or_path}.csv"
        if env_path.exists():
            return env_path
    registry = load_registry(registry_path)
    if name_or_path in registry and Path(registry[name_or_path]).exists():
        return Path(registry[name_or_path])
    raise DatasetError(
        f"dataset {name_or_path!r} not found (looked for a file, ${DATA_DIR_ENV}/{name_or_path}.csv, and the registry)"
    )


def load(name_or_path, registry_path=None):
    path = resolve(name_or_path, registry_path)
    name = Path(name_or_path).stem if Path(name_or_path).suffix else name_or_path
    return load_csv(path, name=name)


def toy_dataset(n=500, seed=0):
    """1-D heteroscedastic regression data whose noise grows with x."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=n)
    noise_sd = 0.05 + 0.45 * (x + 1.0) / 2.0
    y = np.sin(3.0 * x) + noise_sd * rng.standard_normal(n)
    return Dataset(x[:, None], y, "toy")


def toy_noise_sd(x):
    return 0.05 + 0.45 * (np.asarray(x) + 1.0) / 2.0
