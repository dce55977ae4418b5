"""Domain types, CSV ingestion and covariate standardization."""

from __future__ import annotations

import csv
import io
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np

from .errors import (
    DataError,
    MissingColumn,
    NonBinaryTreatment,
    NonFiniteValue,
    SetWithoutBothArms,
    SingletonSet,
    ZeroVariance,
)

__all__ = [
    "CovariateMeta",
    "MatchedDataset",
    "ModelParams",
    "Schema",
    "SensitivityParams",
    "Subject",
    "load_dataset",
    "standardize",
    "write_dataset",
]

STANDARD_SD = 0.5


@dataclass(frozen=True)
class Subject:
    subject_id: str
    set_id: str
    x: Mapping[str, float]
    z: int
    y: float


@dataclass(frozen=True)
class SensitivityParams:
    """Hypothesized confounder: prevalence ``p``, treatment log-odds shift
    ``lam`` and outcome shift ``delta``."""

    p: float
    lam: float
    delta: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise DataError(f"p must lie in [0, 1], got {self.p}")
        if not (math.isfinite(self.lam) and math.isfinite(self.delta)):
            raise DataError("lambda and delta must be finite")


@dataclass(frozen=True)
class ModelParams:
    kappa0: float
    kappa: dict[str, float]
    psi: dict[str, float]
    set_effects: dict[str, float]
    sigma: float
    beta: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class CovariateMeta:
    """Per-covariate type flag plus the affine map applied by :func:`standardize`.

    ``mean``/``sd`` are the original-scale sample mean and SD when the
    covariate has been standardized, else ``None``.
    """

    name: str
    binary: bool
    mean: float | None = None
    sd: float | None = None

    @property
    def standardized(self) -> bool:
        return self.sd is not None

    def to_original_scale(self, coef: float) -> float:
        """Map a coefficient on the standardized covariate back to original units."""
        if self.sd is None:
            return coef
        return coef * STANDARD_SD / self.sd

    def to_standard_scale(self, coef: float) -> float:
        if self.sd is None:
            return coef
        return coef * self.sd / STANDARD_SD


@dataclass(frozen=True)
class Schema:
    """Column roles for :func:`load_dataset`.

    Columns not named here are covariates. ``binary`` overrides the
    automatic {0,1} detection per covariate.
    """

    outcome: str = "y"
    treatment: str = "z"
    set: str = "set"
    id: str | None = None
    binary: Mapping[str, bool] = field(default_factory=dict)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class MatchedDataset:
    """Immutable matched-set data held as arrays.

    Parameters
    ----------
    X : (N, k) array of covariates
    z : (N,) treatment indicators in {0, 1}
    y : (N,) outcomes
    set_ids : N matched-set labels
    covariate_names : k names
    subject_ids : N labels, default ``"1".."N"``
    meta : per-covariate :class:`CovariateMeta`; default detects binary
        columns as those with values exactly {0, 1}
    """

    def __init__(
        self,
        X,
        z,
        y,
        set_ids: Sequence,
        covariate_names: Sequence[str],
        subject_ids: Sequence | None = None,
        meta: Sequence[CovariateMeta] | None = None,
        treatment_name: str = "z",
        outcome_name: str = "y",
    ):
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.shape[0]
        X = np.asarray(X, dtype=float).reshape(n, -1) if n else np.zeros((0, len(covariate_names)))
        z_raw = np.asarray(z, dtype=float).reshape(-1)
        names = tuple(str(c) for c in covariate_names)
        if X.shape[1] != len(names):
            raise DataError("covariate_names does not match the number of columns of X")
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names")
        if z_raw.shape[0] != n or len(set_ids) != n:
            raise DataError("X, z, y and set_ids must have the same length")
        for i, v in enumerate(z_raw):
            if v not in (0.0, 1.0):
                raise NonBinaryTreatment(treatment_name, None, v)
        if not np.all(np.isfinite(y)):
            raise NonFiniteValue(outcome_name, None, y[~np.isfinite(y)][0])
        bad = ~np.isfinite(X)
        if bad.any():
            col = int(np.argwhere(bad)[0][1])
            raise NonFiniteValue(names[col], None, X[bad][0])

        labels = [str(s) for s in set_ids]
        codes, set_labels = _encode(labels)
        if subject_ids is None:
            subject_ids = [str(i + 1) for i in range(n)]
        subject_ids = tuple(str(s) for s in subject_ids)
        if len(subject_ids) != n:
            raise DataError("subject_ids must have one entry per subject")

        if meta is None:
            meta = tuple(CovariateMeta(nm, _is_binary(X[:, j])) for j, nm in enumerate(names))
        else:
            meta = tuple(meta)
            if [m.name for m in meta] != list(names):
                raise DataError("covariate meta does not match covariate names")
        for j, m in enumerate(meta):
            if m.binary and not np.all((X[:, j] == 0) | (X[:, j] == 1)):
                raise DataError(f"covariate {m.name!r} flagged binary but has values outside {{0, 1}}")

        z_int = z_raw.astype(np.int8)
        sizes = np.bincount(codes, minlength=len(set_labels))
        treated = np.bincount(codes, weights=z_int, minlength=len(set_labels))
        for s, lab in enumerate(set_labels):
            if sizes[s] < 2:
                raise SingletonSet(lab)
            if treated[s] == 0 or treated[s] == sizes[s]:
                raise SetWithoutBothArms(lab)

        self._init(X, z_int, y, codes, set_labels, names, subject_ids, meta,
                   treatment_name, outcome_name)

    def _init(self, X, z, y, codes, set_labels, names, subject_ids, meta,
              treatment_name, outcome_name):
        self.X = _readonly(np.ascontiguousarray(X, dtype=float))
        self.z = _readonly(np.asarray(z, dtype=np.int8))
        self.y = _readonly(np.asarray(y, dtype=float))
        self.set_index = _readonly(np.asarray(codes, dtype=np.intp))
        self.set_labels = tuple(set_labels)
        self.covariate_names = tuple(names)
        self.subject_ids = tuple(subject_ids)
        self.covariate_meta = tuple(meta)
        self.treatment_name = treatment_name
        self.outcome_name = outcome_name

    @classmethod
    def _trusted(cls, X, z, y, codes, set_labels, names, subject_ids, meta,
                 treatment_name="z", outcome_name="y") -> "MatchedDataset":
        # Skips validation; callers guarantee the invariants.
        obj = cls.__new__(cls)
        obj._init(X, z, y, codes, set_labels, names, subject_ids, meta,
                  treatment_name, outcome_name)
        return obj

    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]

    @property
    def n_sets(self) -> int:
        return len(self.set_labels)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def sets(self) -> dict[str, np.ndarray]:
        order = np.argsort(self.set_index, kind="stable")
        bounds = np.cumsum(np.bincount(self.set_index, minlength=self.n_sets))[:-1]
        return dict(zip(self.set_labels, np.split(order, bounds)))

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n_subjects)]

    def subject(self, i: int) -> Subject:
        return Subject(
            subject_id=self.subject_ids[i],
            set_id=self.set_labels[self.set_index[i]],
            x=dict(zip(self.covariate_names, self.X[i].tolist())),
            z=int(self.z[i]),
            y=float(self.y[i]),
        )

    def meta(self, name: str) -> CovariateMeta:
        return self.covariate_meta[self.covariate_names.index(name)]

    def take_sets(self, picks: Sequence[int]) -> "MatchedDataset":
        """Dataset made of the given sets (by position), in order.

        Each pick becomes a new set labelled by its position, so a set
        drawn twice yields two distinct sets.
        """
        picks = np.asarray(picks, dtype=np.intp)
        members = self.sets
        rows = [members[self.set_labels[s]] for s in picks]
        idx = np.concatenate(rows)
        codes = np.repeat(np.arange(len(picks)), [len(r) for r in rows])
        return MatchedDataset._trusted(
            self.X[idx], self.z[idx], self.y[idx], codes,
            [str(k) for k in range(len(picks))], self.covariate_names,
            [self.subject_ids[i] for i in idx], self.covariate_meta,
            self.treatment_name, self.outcome_name,
        )

    def with_covariates(self, X, meta) -> "MatchedDataset":
        return MatchedDataset._trusted(
            X, self.z, self.y, self.set_index, self.set_labels, self.covariate_names,
            self.subject_ids, meta, self.treatment_name, self.outcome_name,
        )

    def equals(self, other: "MatchedDataset") -> bool:
        return (
            self.covariate_names == other.covariate_names
            and self.subject_ids == other.subject_ids
            and [self.set_labels[i] for i in self.set_index]
            == [other.set_labels[i] for i in other.set_index]
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.y, other.y)
            and [m.binary for m in self.covariate_meta] == [m.binary for m in other.covariate_meta]
        )

    def __repr__(self):
        return (f"MatchedDataset(N={self.n_subjects}, I={self.n_sets}, "
                f"covariates={list(self.covariate_names)})")


def _encode(labels: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    lookup: dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        codes[i] = lookup.setdefault(lab, len(lookup))
    return codes, list(lookup)


def _is_binary(col: np.ndarray) -> bool:
    vals = np.unique(col)
    return vals.shape[0] == 2 and vals[0] == 0.0 and vals[1] == 1.0


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"), newline=""), False
    if isinstance(source, io.BufferedIOBase) or hasattr(source, "mode") and "b" in getattr(source, "mode", ""):
        return io.TextIOWrapper(source, encoding="utf-8", newline=""), False
    return source, False


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise NonFiniteValue(column, line, text) from None
    if not math.isfinite(v):
        raise NonFiniteValue(column, line, text)
    return v


def load_dataset(source, schema: Schema | None = None) -> MatchedDataset:
    """Read a matched dataset from delimited text with a header row.

    ``source`` is a path, bytes, or a text/binary stream. The delimiter is
    sniffed among comma, tab and semicolon.
    """
    schema = schema or Schema()
    stream, owned = _open_text(source)
    try:
        text = stream.read()
    finally:
        if owned:
            stream.close()
    if not text.strip():
        raise DataError("empty input")
    first = text.splitlines()[0]
    delim = max(",\t;", key=first.count)
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=delim)
    header = [h.strip() for h in next(reader)]
    roles = [schema.outcome, schema.treatment, schema.set] + ([schema.id] if schema.id else [])
    for col in roles:
        if col not in header:
            raise MissingColumn(col)
    pos = {h: i for i, h in enumerate(header)}
    cov_names = [h for h in header if h not in roles]
    unknown = set(schema.binary) - set(cov_names)
    if unknown:
        raise MissingColumn(sorted(unknown)[0])

    ys, zs, sets, ids, rows = [], [], [], [], []
    for line_no, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(rec)}")
        ys.append(_parse_float(rec[pos[schema.outcome]], schema.outcome, line_no))
        zt = rec[pos[schema.treatment]].strip()
        try:
            zv = float(zt)
        except ValueError:
            raise NonBinaryTreatment(schema.treatment, line_no, zt) from None
        if zv not in (0.0, 1.0):
            raise NonBinaryTreatment(schema.treatment, line_no, zt)
        zs.append(int(zv))
        sets.append(rec[pos[schema.set]].strip())
        ids.append(rec[pos[schema.id]].strip() if schema.id else str(len(ids) + 1))
        rows.append([_parse_float(rec[pos[c]], c, line_no) for c in cov_names])
    if not ys:
        raise DataError("no data rows")

    X = np.array(rows, dtype=float).reshape(len(ys), len(cov_names))
    meta = []
    for j, name in enumerate(cov_names):
        binary = schema.binary.get(name, _is_binary(X[:, j]))
        meta.append(CovariateMeta(name, bool(binary)))
    return MatchedDataset(
        X, zs, ys, sets, cov_names, subject_ids=ids, meta=meta,
        treatment_name=schema.treatment, outcome_name=schema.outcome,
    )


def write_dataset(ds: MatchedDataset, stream: IO[str], schema: Schema | None = None) -> None:
    """Write ``ds`` as CSV readable by :func:`load_dataset` with the same schema.

    Values use ``repr`` so floats round-trip exactly.
    """
    schema = schema or Schema(outcome=ds.outcome_name, treatment=ds.treatment_name)
    w = csv.writer(stream, lineterminator="\n")
    head = ([schema.id] if schema.id else []) + [schema.set, schema.treatment, schema.outcome]
    w.writerow(head + list(ds.covariate_names))
    for i in range(ds.n_subjects):
        row = [ds.subject_ids[i]] if schema.id else []
        row += [ds.set_labels[ds.set_index[i]], int(ds.z[i]), repr(float(ds.y[i]))]
        row += [repr(float(v)) for v in ds.X[i]]
        w.writerow(row)


def standardize(ds: MatchedDataset) -> MatchedDataset:
    """Rescale continuous covariates to mean 0 and SD 0.5; binaries untouched.

    SDs use the N-1 denominator over all subjects pooled. The original
    mean and SD are kept in ``covariate_meta`` (composed when the input is
    already standardized, so the record always refers to raw units).
    """
    X = ds.X.copy()
    meta = []
    for j, m in enumerate(ds.covariate_meta):
        if m.binary:
            meta.append(m)
            continue
        col = X[:, j]
        mu = float(col.mean())
        sd = float(col.std(ddof=1)) if col.shape[0] > 1 else 0.0
        if not sd > 0 or np.ptp(col) == 0:
            raise ZeroVariance(m.name)
        X[:, j] = (col - mu) * (STANDARD_SD / sd)
        if m.standardized:
            # raw = m.mean + std1 * m.sd / 0.5, std1 = mu + std2 * sd / 0.5
            orig_mean = m.mean + mu * m.sd / STANDARD_SD
            orig_sd = m.sd * sd / STANDARD_SD
        else:
            orig_mean, orig_sd = mu, sd
        meta.append(replace(m, mean=orig_mean, sd=orig_sd))
    return ds.with_covariates(X, meta)
