"""Longitudinal panel ingestion, validation, and empirical data summaries.

Data are ragged panels: each subject has its own vector of measurement
times and outcomes.  The empirical summaries computed here feed the
default prior construction (see :mod:`pgmm.priors`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ValidationError",
    "ParseError",
    "SubjectSeries",
    "Dataset",
    "EmpiricalStats",
    "load_long_csv",
    "save_long_csv",
    "shift_time_origin",
    "empirical_stats",
]


class ValidationError(ValueError):
    """Input data violates a structural invariant."""


class ParseError(ValueError):
    """Input file is malformed; message carries the offending line number."""


@dataclass(frozen=True)
class SubjectSeries:
    """One subject's measurement times and outcomes (equal length, >= 1)."""

    id: str
    times: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        outcomes = np.asarray(self.outcomes, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)
        if times.ndim != 1 or outcomes.ndim != 1:
            raise ValidationError(f"subject {self.id}: times/outcomes must be 1-d")
        if len(times) != len(outcomes):
            raise ValidationError(f"subject {self.id}: times and outcomes differ in length")
        if len(times) < 1:
            raise ValidationError(f"subject {self.id}: needs at least one observation")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(outcomes))):
            raise ValidationError(f"subject {self.id}: non-finite time or outcome")
        if np.any(np.diff(times) <= 0):
            raise ValidationError(f"subject {self.id}: times must be strictly increasing")

    @property
    def n_obs(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class Dataset:
    """Ragged longitudinal panel; immutable, safe to share across chains.

    ``time_shift`` records the cumulative amount subtracted from all times
    by :func:`shift_time_origin`, so reports can be mapped back to the
    original time scale.
    """

    subjects: tuple[SubjectSeries, ...]
    time_shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if len(self.subjects) < 1:
            raise ValidationError("dataset needs at least one subject")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    def pooled_times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    def pooled_outcomes(self) -> np.ndarray:
        return np.concatenate([s.outcomes for s in self.subjects])


@dataclass(frozen=True)
class EmpiricalStats:
    """Empirical quantities entering the default prior hyperparameters."""

    mean_y_first: float
    var_y_first: float
    sd_y_first: float
    sd_x: float
    sd_y: float
    slope_scale: float
    cp_lower: float
    cp_upper: float
    cp_sd_bound: float

    def __post_init__(self):
        if not all(
            math.isfinite(v)
            for v in (
                self.mean_y_first,
                self.var_y_first,
                self.sd_y_first,
                self.sd_x,
                self.sd_y,
                self.slope_scale,
                self.cp_lower,
                self.cp_upper,
                self.cp_sd_bound,
            )
        ):
            raise ValidationError("non-finite empirical statistic")
        if self.cp_lower >= self.cp_upper:
            raise ValidationError("changepoint support is empty (cp_lower >= cp_upper)")
        for name in ("var_y_first", "sd_y_first", "sd_x", "sd_y", "slope_scale", "cp_sd_bound"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


def load_long_csv(path) -> Dataset:
    """Read a long-format CSV (`subject,time,value`) into a Dataset.

    Rows with an empty value field are dropped for that subject only, so
    ragged panels with missing outcomes are supported.  Subjects appear in
    first-occurrence order; observations are sorted by time.
    """
    groups: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        expected = ["subject", "time", "value"]
        if [h.strip() for h in header] != expected:
            raise ParseError(f"{path}: line 1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            subj, time_s, value_s = (c.strip() for c in row)
            if not subj:
                raise ParseError(f"{path}: line {lineno}: empty subject id")
            try:
                t = float(time_s)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad time {time_s!r}") from None
            if value_s == "":
                continue  # missing outcome: drop the occasion for this subject
            try:
                y = float(value_s)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad value {value_s!r}") from None
            groups.setdefault(subj, []).append((t, y))
    if not groups:
        raise ValidationError(f"{path}: no observations")
    subjects = []
    for subj, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        if len(np.unique(times)) != len(times):
            raise ValidationError(f"{path}: subject {subj}: duplicate (subject,time) rows")
        outcomes = np.array([r[1] for r in rows])
        subjects.append(SubjectSeries(subj, times, outcomes))
    return Dataset(tuple(subjects))


def save_long_csv(d: Dataset, path) -> None:
    """Write a Dataset back out in the same long CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "time", "value"])
        for s in d.subjects:
            for t, y in zip(s.times, s.outcomes):
                writer.writerow([s.id, repr(float(t)), repr(float(y))])


def shift_time_origin(d: Dataset) -> Dataset:
    """Shift all times so the earliest measured time point is 0.

    Idempotent after the first application; the applied shift accumulates
    in ``time_shift`` for report-time back-transformation.
    """
    t0 = min(float(s.times[0]) for s in d.subjects)
    if t0 == 0.0:
        return d
    subjects = tuple(
        SubjectSeries(s.id, s.times - t0, s.outcomes.copy()) for s in d.subjects
    )
    return Dataset(subjects, time_shift=d.time_shift + t0)


def empirical_stats(d: Dataset) -> EmpiricalStats:
    """Compute the empirical inputs to the default prior system.

    Baseline mean/variance use each subject's earliest outcome (equal to
    the outcome at time 0 when every subject is measured there).  Pooled
    standard deviations use the N-1 convention and include duplicate time
    values across subjects.  The changepoint support is bounded by the
    second-smallest and second-largest *distinct* pooled times.
    """
    if d.n_subjects < 2:
        raise ValidationError("need at least 2 subjects for empirical variances")
    first_y = np.array([s.outcomes[0] for s in d.subjects])
    mean_y_first = float(np.mean(first_y))
    var_y_first = float(np.var(first_y, ddof=1))
    xs = d.pooled_times()
    ys = d.pooled_outcomes()
    distinct = np.unique(xs)
    if len(distinct) < 4:
        raise ValidationError(
            "fewer than 4 distinct time points: changepoint bounds undefined"
        )
    sd_x = float(np.std(xs, ddof=1))
    sd_y = float(np.std(ys, ddof=1))
    if sd_x == 0.0:
        raise ValidationError("zero variance in measurement times")
    return EmpiricalStats(
        mean_y_first=mean_y_first,
        var_y_first=var_y_first,
        sd_y_first=math.sqrt(var_y_first),
        sd_x=sd_x,
        sd_y=sd_y,
        slope_scale=sd_y / sd_x,
        cp_lower=float(distinct[1]),
        cp_upper=float(distinct[-2]),
        cp_sd_bound=float((distinct[-1] - distinct[0]) / 4.0),
    )
