"""Longitudinal data container, kink/null design construction, and CSV I/O.

A dataset is a collection of subjects, each measured repeatedly.  Every
observation carries a response ``y``, a scalar threshold covariate ``x``
and an optional covariate vector ``z`` of common length ``q``.  The
container is immutable after construction so that bootstrap and Monte
Carlo workers can share it freely.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CsvFormatError, InvalidDataError, InvalidInputError

__all__ = [
    "QuantileGrid",
    "Subject",
    "LongitudinalDataset",
    "ValidationReport",
    "KinkDesignRow",
    "NullDesignRow",
    "build_kink_design",
    "build_null_design",
    "kink_design_matrix",
    "null_design_matrix",
    "validate",
    "read_csv",
    "write_csv",
]


# ---------------------------------------------------------------------------
# Quantile grid

# Quantile levels must stay this far from 0 and 1.
TAU_MARGIN = 0.01


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels, bounded away from {0, 1}."""

    taus: tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if len(taus) == 0:
            raise InvalidInputError("quantile grid is empty")
        for t in taus:
            if not math.isfinite(t):
                raise InvalidInputError(f"non-finite quantile level {t}")
            if not (TAU_MARGIN <= t <= 1.0 - TAU_MARGIN):
                raise InvalidInputError(
                    f"quantile level {t} outside [{TAU_MARGIN}, {1 - TAU_MARGIN}]"
                )
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise InvalidInputError(f"quantile levels not strictly increasing: {taus}")
        object.__setattr__(self, "taus", taus)

    @classmethod
    def of(cls, taus) -> "QuantileGrid":
        """Coerce a float, a sequence of floats, or a grid to a grid."""
        if isinstance(taus, QuantileGrid):
            return taus
        if isinstance(taus, (int, float)):
            return cls((float(taus),))
        return cls(tuple(float(t) for t in taus))

    @property
    def K(self) -> int:
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def __len__(self):
        return len(self.taus)


# ---------------------------------------------------------------------------
# Dataset

@dataclass(frozen=True)
class Subject:
    """One subject's repeated observations, kept in measurement order."""

    id: str
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray  # shape (n_i, q); q may be 0

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    errors: tuple[str, ...]
    N: int = 0
    n: int = 0
    q: int = -1
    counts: tuple[int, ...] = ()
    x_range: tuple[float, float] | None = None

    def __str__(self) -> str:
        if self.ok:
            rng = "" if self.x_range is None else f", x in [{self.x_range[0]}, {self.x_range[1]}]"
            return f"ok: N={self.N}, n={self.n}, q={self.q}{rng}"
        return "invalid dataset: " + "; ".join(self.errors)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


class LongitudinalDataset:
    """Immutable container for longitudinal (y, x, z) observations.

    Subjects are kept in input order.  Pooled views (``y``, ``x``, ``z``,
    ``subject_index``) concatenate the subjects in that order and are
    read-only.
    """

    __slots__ = ("subjects", "y", "x", "z", "subject_index", "counts",
                 "starts", "N", "n", "q")

    def __init__(self, subjects: Sequence[Subject]):
        report = _validate_subjects(subjects)
        if not report.ok:
            raise InvalidDataError(report)
        self_subjects = tuple(subjects)
        self.subjects = self_subjects
        self.y = _freeze(np.concatenate([s.y for s in self_subjects]))
        self.x = _freeze(np.concatenate([s.x for s in self_subjects]))
        self.z = _freeze(np.concatenate([s.z for s in self_subjects], axis=0))
        counts = np.array([s.n_obs for s in self_subjects], dtype=np.intp)
        self.counts = _freeze_int(counts)
        starts = np.zeros(len(counts) + 1, dtype=np.intp)
        np.cumsum(counts, out=starts[1:])
        self.starts = _freeze_int(starts)
        self.subject_index = _freeze_int(np.repeat(np.arange(len(counts)), counts))
        self.N = int(len(self_subjects))
        self.n = int(counts.sum())
        self.q = int(self.z.shape[1])

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_arrays(cls, subject_ids, y, x, z=None) -> "LongitudinalDataset":
        """Build a dataset from flat arrays, grouping rows by subject id.

        Groups follow first-appearance order of the ids; rows within a
        group keep file order.
        """
        ids = [str(s) for s in subject_ids]
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        if z is None:
            z = np.empty((len(ids), 0))
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not (len(ids) == y.shape[0] == x.shape[0] == z.shape[0]):
            raise InvalidInputError("subject_ids, y, x, z must have equal length")
        order: dict[str, list[int]] = {}
        for i, s in enumerate(ids):
            order.setdefault(s, []).append(i)
        subjects = [
            Subject(id=s, y=_freeze(y[idx]), x=_freeze(x[idx]), z=_freeze(z[idx]))
            for s, idx in order.items()
        ]
        return cls(subjects)

    # -- views -------------------------------------------------------------

    def subject_slice(self, i: int) -> slice:
        return slice(int(self.starts[i]), int(self.starts[i + 1]))

    def describe(self) -> ValidationReport:
        return validate(self)

    def permuted(self, order: Sequence[int]) -> "LongitudinalDataset":
        """Dataset with subjects re-ordered (estimators must not care)."""
        return LongitudinalDataset([self.subjects[i] for i in order])

    def resampled(self, indices: Sequence[int]) -> "LongitudinalDataset":
        """Dataset made of the given subjects (repeats allowed); ids are
        suffixed to stay unique."""
        subs = []
        for pos, i in enumerate(indices):
            s = self.subjects[i]
            subs.append(Subject(id=f"{s.id}#{pos}", y=s.y, x=s.x, z=s.z))
        return LongitudinalDataset(subs)

    def __repr__(self):
        return f"LongitudinalDataset(N={self.N}, n={self.n}, q={self.q})"


def _freeze_int(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _validate_subjects(subjects: Sequence[Subject]) -> ValidationReport:
    errors: list[str] = []
    if len(subjects) == 0:
        return ValidationReport(ok=False, errors=("no subjects",))
    if len(subjects) < 2:
        errors.append("fewer than 2 subjects")
    q = None
    counts = []
    for s in subjects:
        if s.n_obs < 1:
            errors.append(f"subject {s.id!r}: empty subject")
            continue
        if s.z.ndim != 2 or s.z.shape[0] != s.n_obs or s.y.shape != s.x.shape:
            errors.append(f"subject {s.id!r}: mismatched array shapes")
            continue
        if q is None:
            q = s.z.shape[1]
        elif s.z.shape[1] != q:
            errors.append(
                f"subject {s.id!r}: inconsistent z dimension "
                f"({s.z.shape[1]} != {q})"
            )
        for name, arr in (("y", s.y), ("x", s.x), ("z", s.z)):
            bad = ~np.isfinite(arr)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                errors.append(f"subject {s.id!r}: non-finite {name} at row {row}")
        counts.append(s.n_obs)
    if errors:
        return ValidationReport(ok=False, errors=tuple(errors))
    x_all = np.concatenate([s.x for s in subjects])
    return ValidationReport(
        ok=True,
        errors=(),
        N=len(subjects),
        n=int(sum(counts)),
        q=int(q if q is not None else 0),
        counts=tuple(counts),
        x_range=(float(x_all.min()), float(x_all.max())),
    )


def validate(dataset) -> ValidationReport:
    """Validation report for a dataset or a raw sequence of subjects."""
    if isinstance(dataset, LongitudinalDataset):
        return _validate_subjects(dataset.subjects)
    return _validate_subjects(list(dataset))


# ---------------------------------------------------------------------------
# Design rows

@dataclass(frozen=True)
class KinkDesignRow:
    """(1, (x-t)*1[x<=t], (x-t)*1[x>t], z) — length q+3."""

    values: np.ndarray


@dataclass(frozen=True)
class NullDesignRow:
    """(1, x, z) — length q+2."""

    values: np.ndarray


def _check_finite_scalar(name: str, v: float) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise InvalidInputError(f"non-finite {name}: {v}")
    return v


def build_kink_design(x: float, z, t: float) -> KinkDesignRow:
    """Design row for the kink model at candidate change point ``t``.

    Ties ``x == t`` go to the left regime (both kink carriers vanish
    there, so the fitted value is unaffected either way).
    """
    x = _check_finite_scalar("x", x)
    t = _check_finite_scalar("t", t)
    z = np.asarray(z, dtype=float).ravel()
    if not np.isfinite(z).all():
        raise InvalidInputError("non-finite z")
    row = np.empty(3 + z.size)
    row[0] = 1.0
    row[1] = (x - t) if x <= t else 0.0
    row[2] = (x - t) if x > t else 0.0
    row[3:] = z
    return KinkDesignRow(_freeze(row))


def build_null_design(x: float, z) -> NullDesignRow:
    """Design row for the no-kink (single slope) model."""
    x = _check_finite_scalar("x", x)
    z = np.asarray(z, dtype=float).ravel()
    if not np.isfinite(z).all():
        raise InvalidInputError("non-finite z")
    row = np.empty(2 + z.size)
    row[0] = 1.0
    row[1] = x
    row[2:] = z
    return NullDesignRow(_freeze(row))


def kink_design_matrix(x: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    """Vectorized kink design: n x (q+3)."""
    if not math.isfinite(t):
        raise InvalidInputError(f"non-finite t: {t}")
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    q = 0 if z is None else z.shape[1]
    out = np.empty((n, q + 3))
    out[:, 0] = 1.0
    left = x <= t
    d = x - t
    out[:, 1] = np.where(left, d, 0.0)
    out[:, 2] = np.where(left, 0.0, d)
    if q:
        out[:, 3:] = z
    return out


def null_design_matrix(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorized null design: n x (q+2)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    q = 0 if z is None else z.shape[1]
    out = np.empty((n, q + 2))
    out[:, 0] = 1.0
    out[:, 1] = x
    if q:
        out[:, 2:] = z
    return out


# ---------------------------------------------------------------------------
# CSV interface: header `subject,y,x,z1,...,zq`

def read_csv(path) -> LongitudinalDataset:
    """Read a dataset from CSV (header ``subject,y,x,z1,...,zq``)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("line 1: empty file, header required") from None
        expected = ["subject", "y", "x"]
        if [h.strip() for h in header[:3]] != expected:
            raise CsvFormatError(
                f"line 1: header must start with 'subject,y,x', got {header[:3]}"
            )
        q = len(header) - 3
        for j in range(q):
            if header[3 + j].strip() != f"z{j + 1}":
                raise CsvFormatError(
                    f"line 1: column {4 + j} must be named 'z{j + 1}', "
                    f"got {header[3 + j]!r}"
                )
        ids: list[str] = []
        ys: list[float] = []
        xs: list[float] = []
        zs: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + q:
                raise CsvFormatError(
                    f"line {lineno}: expected {3 + q} fields, got {len(row)}"
                )
            ids.append(row[0])
            try:
                ys.append(float(row[1]))
                xs.append(float(row[2]))
                zs.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from None
    if not ids:
        raise InvalidDataError(ValidationReport(ok=False, errors=("no subjects",)))
    z = np.asarray(zs, dtype=float).reshape(len(ids), q)
    return LongitudinalDataset.from_arrays(ids, ys, xs, z)


def write_csv(dataset: LongitudinalDataset, path) -> None:
    """Write a dataset in the identical CSV format read by :func:`read_csv`."""
    header = ["subject", "y", "x"] + [f"z{j + 1}" for j in range(dataset.q)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset.subjects:
            for j in range(s.n_obs):
                writer.writerow(
                    [s.id, repr(float(s.y[j])), repr(float(s.x[j]))]
                    + [repr(float(v)) for v in s.z[j]]
                )
