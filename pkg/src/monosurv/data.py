"""Toy simulators, CSV ingestion, preprocessing and fold splitting."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataError, UsageError

TOY_KINDS = ("weibull", "normal", "checkerboard")
CENSOR_MEAN = 1.5
NORMAL_LOC = 100.0
NORMAL_SD_SCALE = 6.0
NORMAL_SD_FLOOR = 1e-3
CB_COLUMNS, CB_ROWS = 4, 6


@dataclass(frozen=True)
class SurvivalRecord:
    covariates: np.ndarray
    duration: float
    event: int


@dataclass
class Dataset:
    """Right-censored sample held column-wise.

    ``covariates`` is ``(n, p)``; ``durations`` and ``events`` are ``(n,)``.
    ``latent`` is only filled by the simulators when asked to keep the
    underlying event and censoring times.
    """

    covariates: np.ndarray
    durations: np.ndarray
    events: np.ndarray
    columns: list[str] = field(default_factory=list)
    provenance: str | None = None
    latent: dict | None = None

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        self.durations = np.asarray(self.durations, dtype=np.float64).ravel()
        self.events = np.asarray(self.events).astype(np.int64).ravel()
        n = len(self.durations)
        if self.covariates.shape[0] != n or len(self.events) != n:
            raise DataError("covariates, durations and events differ in length")
        if not np.all(np.isfinite(self.durations)) or np.any(self.durations < 0):
            raise DataError("durations must be finite and non-negative")
        if not np.all(np.isin(self.events, (0, 1))):
            raise DataError("event indicators must be 0 or 1")
        if not self.columns:
            self.columns = [f"x{j}" for j in range(self.covariates.shape[1])]

    def __len__(self):
        return len(self.durations)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def records(self) -> Iterator[SurvivalRecord]:
        for x, z, d in zip(self.covariates, self.durations, self.events):
            yield SurvivalRecord(x, float(z), int(d))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        latent = None
        if self.latent is not None:
            latent = {k: v[index] for k, v in self.latent.items()}
        return Dataset(self.covariates[index], self.durations[index], self.events[index],
                       list(self.columns), self.provenance, latent)

    def censoring_proportion(self) -> float:
        return float(1.0 - self.events.mean())


# -- simulators --------------------------------------------------------------

def checkerboard_rows(x) -> np.ndarray:
    """Permitted 0-based row indices for each covariate, shape ``(n, 3)``."""
    col = np.minimum(np.floor(np.asarray(x) * CB_COLUMNS).astype(int), CB_COLUMNS - 1)
    start = np.where(col % 2 == 0, 0, 1)  # 1st/3rd column -> rows 1,3,5 (0,2,4 zero-based)
    return start[:, None] + np.array([0, 2, 4])[None, :]


def simulate_toy(kind: str, n: int, seed: int, keep_latent: bool = False) -> Dataset:
    """Draw ``n`` records from one of the univariate toy distributions.

    X ~ U[0, 1] throughout. ``weibull``: T ~ Weibull(shape 2 + 6X, scale 1),
    C ~ Exp(mean 1.5). ``normal``: T ~ N(100, 6X), C ~ N(100, 6), both clipped
    at 0. ``checkerboard``: T uniform on the three permitted rows of the
    4x6 grid over [0, 1]^2, C ~ Exp(mean 1.5). Ties T == C count as events.
    """
    if kind not in TOY_KINDS:
        raise UsageError(f"unknown toy kind {kind!r}; expected one of {TOY_KINDS}")
    if n < 1:
        raise UsageError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    if kind == "weibull":
        t = rng.weibull(2.0 + 6.0 * x)
        c = rng.exponential(CENSOR_MEAN, size=n)
    elif kind == "normal":
        sd = np.maximum(NORMAL_SD_SCALE * x, NORMAL_SD_FLOOR)
        t = np.maximum(rng.normal(NORMAL_LOC, sd), 0.0)
        c = np.maximum(rng.normal(NORMAL_LOC, NORMAL_SD_SCALE, size=n), 0.0)
    else:
        rows = checkerboard_rows(x)
        pick = rows[np.arange(n), rng.integers(0, 3, size=n)]
        t = (pick + rng.uniform(0.0, 1.0, size=n)) / CB_ROWS
        c = rng.exponential(CENSOR_MEAN, size=n)
    z = np.minimum(t, c)
    d = (t <= c).astype(np.int64)
    latent = {"event_time": t, "censor_time": c} if keep_latent else None
    return Dataset(x[:, None], z, d, ["x"], f"{kind}:seed={seed}", latent)


def weibull_shape(x):
    return 2.0 + 6.0 * np.asarray(x, dtype=np.float64)


def weibull_true_survival(t, x):
    """Closed-form S(t | x) of the Weibull toy."""
    return np.exp(-np.power(np.asarray(t, dtype=np.float64), weibull_shape(x)))


def weibull_true_log_density(t, x):
    t = np.asarray(t, dtype=np.float64)
    k = weibull_shape(x)
    return np.log(k) + (k - 1.0) * np.log(t) - np.power(t, k)


# -- CSV ---------------------------------------------------------------------

def load_csv(path, duration_column: str = "duration", event_column: str = "event") -> Dataset:
    """Read a header-first, comma-separated file.

    Every column other than the duration and event columns becomes a
    covariate, in header order. Rows are numbered from 1 (the first data row).
    """
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        for col in (duration_column, event_column):
            if col not in header:
                raise DataError(f"missing column {col!r} in {path}", column=col)
        di, ei = header.index(duration_column), header.index(event_column)
        cov_idx = [j for j in range(len(header)) if j not in (di, ei)]
        X, Z, D = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
            vals = []
            for j, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"non-numeric cell {cell!r}", row=row_no, column=header[j]) from None
            if not math.isfinite(vals[di]) or vals[di] < 0:
                raise DataError(f"bad duration {row[di]!r}", row=row_no, column=duration_column)
            if vals[ei] not in (0.0, 1.0):
                raise DataError(f"bad event value {row[ei]!r}", row=row_no, column=event_column)
            X.append([vals[j] for j in cov_idx])
            Z.append(vals[di])
            D.append(int(vals[ei]))
    if not Z:
        raise DataError(f"no data rows in {path}")
    return Dataset(np.array(X, dtype=np.float64).reshape(len(Z), len(cov_idx)), Z, D,
                   [header[j] for j in cov_idx], os.path.basename(str(path)))


def save_csv(dataset: Dataset, path) -> None:
    """Write ``columns..., duration, event``; floats use round-trip repr."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.columns) + ["duration", "event"])
        for x, z, d in zip(dataset.covariates, dataset.durations, dataset.events):
            w.writerow([repr(float(v)) for v in x] + [repr(float(z)), int(d)])
    os.replace(tmp, path)


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessStats:
    means: np.ndarray
    sds: np.ndarray
    time_scale: float

    def transform_covariates(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.means) / self.sds

    def transform_times(self, t) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) / self.time_scale

    def to_dict(self) -> dict:
        return {"means": [float(v) for v in self.means], "sds": [float(v) for v in self.sds],
                "time_scale": float(self.time_scale)}

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessStats":
        return cls(np.array(doc["means"], dtype=np.float64), np.array(doc["sds"], dtype=np.float64),
                   float(doc["time_scale"]))


def fit_preprocess(train: Dataset) -> PreprocessStats:
    if len(train) == 0:
        raise UsageError("cannot fit preprocessing on an empty dataset")
    means = train.covariates.mean(axis=0)
    sds = np.maximum(train.covariates.std(axis=0), 1e-12)
    scale = float(train.durations.max())
    if scale <= 0:
        scale = 1.0
    return PreprocessStats(means, sds, scale)


def apply_preprocess(stats: PreprocessStats, data: Dataset) -> Dataset:
    """Standardised covariates and durations divided by the training maximum (no clipping)."""
    return Dataset(stats.transform_covariates(data.covariates), stats.transform_times(data.durations),
                   data.events.copy(), list(data.columns), data.provenance)


# -- folds -------------------------------------------------------------------

def kfold_split(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    if k < 1 or n < k:
        raise UsageError(f"cannot split {n} records into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def cv_rounds(folds: list[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Rotation schedule: round r tests on fold r, validates on fold r+1, trains on the rest."""
    k = len(folds)
    if k < 3:
        raise UsageError("the train/validation/test rotation needs at least 3 folds")
    rounds = []
    for r in range(k):
        val = (r + 1) % k
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j not in (r, val)]))
        rounds.append((train, folds[val], folds[r]))
    return rounds
