"""Panel data container, CSV ingestion/export and design-matrix construction.

A :class:`PanelDataset` is stored column-wise (one float array per variable,
``NaN`` where the cell is MISSING) because every consumer wants arrays. The
row-object view (:class:`SubjectBlock` / :class:`OccasionRow`) is built on
demand for callers that want per-occasion records.
"""
from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateOccasion,
    InvalidConfig,
    LevelNotObserved,
    ParseError,
    RaggedRow,
    UnknownVariable,
)


class _Missing:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()

DEFAULT_SENTINELS = ("", "NA")
LABEL_COLUMNS = ("subject", "day", "beep")


@dataclass(frozen=True)
class OccasionRow:
    values: Mapping[str, object]
    missingness_covariates: tuple
    occasion_labels: Mapping[str, int]


@dataclass(frozen=True)
class SubjectBlock:
    subject_id: str
    occasions: tuple


class PanelDataset:
    """Immutable subject x occasion table with per-variable missing masks.

    Parameters
    ----------
    subject : sequence of str
        Subject id of each row.
    day, beep : sequence of int
        Occasion labels. Rows are re-sorted into subject blocks (first
        appearance order) ordered by ``(day, beep)``.
    columns : mapping of variable name to sequence of float
        ``NaN`` (or ``None``/:data:`MISSING`) marks a missing cell.
    missingness_covariate_names : sequence of str
        Design terms (see :func:`parse_term`) evaluated per occasion to form
        the missingness covariate vector. Must not reference data variables
        that can be missing.
    """

    def __init__(self, subject, day, beep, columns, missingness_covariate_names=("day", "beep")):
        subject = np.asarray([str(s) for s in subject], dtype=object)
        day = np.asarray(day, dtype=np.int64)
        beep = np.asarray(beep, dtype=np.int64)
        n = subject.shape[0]
        if day.shape[0] != n or beep.shape[0] != n:
            raise ValueError("subject, day and beep must have equal length")
        if n == 0:
            raise ValueError("dataset has no rows")
        cols = {}
        for name, values in columns.items():
            if name in LABEL_COLUMNS:
                raise ValueError(f"{name!r} is a reserved label column")
            arr = np.array([np.nan if (v is None or v is MISSING) else v for v in values], dtype=float)
            if arr.shape[0] != n:
                raise ValueError(f"column {name!r} has {arr.shape[0]} rows, expected {n}")
            if np.isinf(arr).any():
                raise ValueError(f"column {name!r} contains infinite values")
            cols[name] = arr

        first_seen = {}
        for s in subject:
            first_seen.setdefault(s, len(first_seen))
        group = np.array([first_seen[s] for s in subject])
        order = np.lexsort((beep, day, group))
        group, day, beep = group[order], day[order], beep[order]
        same = (group[1:] == group[:-1]) & (day[1:] == day[:-1]) & (beep[1:] == beep[:-1])
        if same.any():
            k = int(np.flatnonzero(same)[0]) + 1
            sid = list(first_seen)[group[k]]
            raise DuplicateOccasion(f"subject {sid!r} has duplicate occasion day={day[k]} beep={beep[k]}")

        self._subject_ids = tuple(first_seen)
        self._subj = group.astype(np.int64)
        self._day = day
        self._beep = beep
        self._columns = {name: arr[order] for name, arr in cols.items()}
        for arr in self._columns.values():
            arr.setflags(write=False)
        for arr in (self._subj, self._day, self._beep):
            arr.setflags(write=False)
        self.missingness_covariate_names = tuple(missingness_covariate_names)
        for term in self.missingness_covariate_names:
            t = parse_term(term)
            if t.variable not in ("day", "beep") and np.isnan(self.column(t.variable)).any():
                raise InvalidConfig(f"missingness covariate {term!r} has missing cells")

    # -- basic shape -------------------------------------------------------
    @property
    def variable_names(self):
        return list(self._columns)

    @property
    def subject_ids(self):
        return self._subject_ids

    @property
    def n_subjects(self):
        return len(self._subject_ids)

    @property
    def n_rows(self):
        return self._subj.shape[0]

    @property
    def subject_index(self):
        return self._subj

    @property
    def day(self):
        return self._day

    @property
    def beep(self):
        return self._beep

    @cached_property
    def subject_slices(self):
        bounds = np.flatnonzero(np.diff(self._subj)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [self.n_rows]])
        return [slice(int(a), int(b)) for a, b in zip(starts, stops)]

    @cached_property
    def occasions_per_subject(self):
        return np.bincount(self._subj, minlength=self.n_subjects)

    # -- columns -----------------------------------------------------------
    def column(self, name):
        if name == "day":
            return self._day.astype(float)
        if name == "beep":
            return self._beep.astype(float)
        try:
            return self._columns[name]
        except KeyError:
            raise UnknownVariable(name) from None

    def missing_mask(self, name):
        return np.isnan(self.column(name))

    def missing_rate(self, name=None):
        """Fraction of missing cells in ``name`` (or across all variables)."""
        names = [name] if name is not None else self.variable_names
        masks = [self.missing_mask(v) for v in names]
        return float(np.mean(np.concatenate(masks))) if masks else 0.0

    def with_column(self, name, values):
        """Return a copy with ``name`` replaced (or added)."""
        cols = dict(self._columns)
        cols[name] = np.asarray(values, dtype=float)
        return PanelDataset._from_sorted(self, cols)

    @classmethod
    def _from_sorted(cls, template, columns):
        obj = cls.__new__(cls)
        obj._subject_ids = template._subject_ids
        obj._subj = template._subj
        obj._day = template._day
        obj._beep = template._beep
        obj.missingness_covariate_names = template.missingness_covariate_names
        obj._columns = {}
        for k, v in columns.items():
            arr = np.array(v, dtype=float)
            if arr.shape[0] != template.n_rows:
                raise ValueError(f"column {k!r} has wrong length")
            arr.setflags(write=False)
            obj._columns[k] = arr
        return obj

    # -- row view ----------------------------------------------------------
    @cached_property
    def subjects(self):
        tvals = np.column_stack(
            [evaluate_term(self, parse_term(t)) for t in self.missingness_covariate_names]
        ) if self.missingness_covariate_names else np.zeros((self.n_rows, 0))
        blocks = []
        for sid, sl in zip(self._subject_ids, self.subject_slices):
            rows = []
            for r in range(sl.start, sl.stop):
                values = {
                    k: (MISSING if math.isnan(v[r]) else float(v[r])) for k, v in self._columns.items()
                }
                rows.append(
                    OccasionRow(
                        values=values,
                        missingness_covariates=tuple(float(x) for x in tvals[r]),
                        occasion_labels={"day": int(self._day[r]), "beep": int(self._beep[r])},
                    )
                )
            blocks.append(SubjectBlock(subject_id=sid, occasions=tuple(rows)))
        return tuple(blocks)

    def __repr__(self):
        return (
            f"PanelDataset(n_subjects={self.n_subjects}, n_rows={self.n_rows}, "
            f"variables={self.variable_names})"
        )

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        if self._subject_ids != other._subject_ids or self.variable_names != other.variable_names:
            return False
        if not (np.array_equal(self._subj, other._subj) and np.array_equal(self._day, other._day)
                and np.array_equal(self._beep, other._beep)):
            return False
        return all(np.array_equal(self._columns[k], other._columns[k], equal_nan=True) for k in self._columns)

    __hash__ = None


# ---------------------------------------------------------------------------
# design terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    """One design column.

    ``kind`` is ``"raw"``, ``"cont"`` (an integer label cast to a continuous
    covariate) or ``"dummy"`` (indicator of ``variable`` taking any value in
    ``levels``).
    """

    kind: str
    variable: str
    levels: tuple = ()

    @property
    def name(self):
        if self.kind == "raw":
            return self.variable
        if self.kind == "cont":
            return f"cont({self.variable})"
        lv = "|".join(_fmt_level(x) for x in self.levels)
        return f"dummy({self.variable}={lv})"

    def __str__(self):
        return self.name


def _fmt_level(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


_DUMMY_RE = re.compile(r"^dummy\(\s*([A-Za-z_][\w.]*)\s*=\s*([^)]+)\)$")
_CONT_RE = re.compile(r"^cont\(\s*([A-Za-z_][\w.]*)\s*\)$")


def parse_term(spec):
    """Parse ``"x"``, ``"cont(day)"`` or ``"dummy(beep=9|10)"`` into a :class:`Term`."""
    if isinstance(spec, Term):
        return spec
    s = str(spec).strip()
    m = _DUMMY_RE.match(s)
    if m:
        var = m.group(1)
        levels = []
        for tok in m.group(2).split("|"):
            tok = tok.strip()
            rng = re.match(r"^(\d+)\s*-\s*(\d+)$", tok)
            try:
                if rng:
                    levels.extend(range(int(rng.group(1)), int(rng.group(2)) + 1))
                else:
                    levels.append(float(tok))
            except ValueError:
                raise InvalidConfig(f"bad dummy level {tok!r} in {spec!r}") from None
        return Term("dummy", var, tuple(float(x) for x in levels))
    m = _CONT_RE.match(s)
    if m:
        return Term("cont", m.group(1))
    if not re.match(r"^[A-Za-z_][\w.]*$", s):
        raise InvalidConfig(f"cannot parse design term {spec!r}")
    return Term("raw", s)


def evaluate_term(dataset, term):
    col = dataset.column(term.variable)
    if term.kind in ("raw", "cont"):
        return np.array(col, dtype=float)
    present = ~np.isnan(col)
    hit = np.isin(col, np.asarray(term.levels))
    if not (hit & present).any():
        raise LevelNotObserved(f"{term.name}: no row has {term.variable} in {list(term.levels)}")
    out = hit.astype(float)
    out[~present] = np.nan
    return out


@dataclass(frozen=True)
class DesignSpec:
    mean_covariates: tuple = ()
    variance_covariates: tuple = ()
    missing_covariates: tuple = ()

    def __post_init__(self):
        for attr in ("mean_covariates", "variance_covariates", "missing_covariates"):
            object.__setattr__(self, attr, tuple(parse_term(t) for t in getattr(self, attr)))

    @classmethod
    def from_mapping(cls, cfg):
        return cls(
            mean_covariates=cfg.get("mean", ()) or (),
            variance_covariates=cfg.get("variance", cfg.get("mean", ())) or (),
            missing_covariates=cfg.get("missing", ()) or (),
        )

    def to_mapping(self):
        return {
            "mean": [t.name for t in self.mean_covariates],
            "variance": [t.name for t in self.variance_covariates],
            "missing": [t.name for t in self.missing_covariates],
        }

    def variables(self):
        return {t.variable for t in self.mean_covariates + self.variance_covariates + self.missing_covariates}


@dataclass
class DesignMatrices:
    """Row-aligned model inputs for one response variable.

    ``missing`` is the missing indicator of the response (1 = missing).
    ``covariate_missing`` flags rows where a mean or variance covariate is
    itself missing; such rows can only be used when the response is missing
    too (they are skipped by the likelihood).
    """

    response: str
    y: np.ndarray
    missing: np.ndarray
    X_mean: np.ndarray
    X_var: np.ndarray
    T: np.ndarray
    subj: np.ndarray
    subject_ids: tuple
    mean_names: list
    var_names: list
    miss_names: list
    covariate_missing: np.ndarray
    day: np.ndarray = field(repr=False, default=None)
    beep: np.ndarray = field(repr=False, default=None)

    @property
    def n_subjects(self):
        return len(self.subject_ids)

    @property
    def n_rows(self):
        return self.y.shape[0]

    @property
    def observed(self):
        return ~self.missing

    @property
    def n_obs(self):
        return int(self.observed.sum())

    @property
    def m(self):
        return self.missing.astype(float)

    @cached_property
    def subject_slices(self):
        bounds = np.flatnonzero(np.diff(self.subj)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [self.n_rows]])
        return [slice(int(a), int(b)) for a, b in zip(starts, stops)]


def _stack(dataset, terms):
    if not terms:
        return np.zeros((dataset.n_rows, 0))
    return np.column_stack([evaluate_term(dataset, t) for t in terms])


def build_design(dataset, spec, response):
    """Build response vector, mask and design matrices for ``response``."""
    if response not in dataset.variable_names:
        raise UnknownVariable(response)
    for t in spec.mean_covariates + spec.variance_covariates + spec.missing_covariates:
        if t.variable == response:
            raise InvalidConfig(f"design term {t.name} references the response {response!r}")
        if t.variable not in ("day", "beep") and t.variable not in dataset.variable_names:
            raise UnknownVariable(t.variable)
    y = np.array(dataset.column(response), dtype=float)
    missing = np.isnan(y)
    X_mean = _stack(dataset, spec.mean_covariates)
    X_var = _stack(dataset, spec.variance_covariates)
    T = _stack(dataset, spec.missing_covariates)
    if np.isnan(T).any():
        bad = [t.name for t, c in zip(spec.missing_covariates, T.T) if np.isnan(c).any()]
        raise InvalidConfig(f"missingness covariates must be fully observed: {bad}")
    cov_missing = np.isnan(X_mean).any(axis=1) | np.isnan(X_var).any(axis=1)
    return DesignMatrices(
        response=response,
        y=y,
        missing=missing,
        X_mean=X_mean,
        X_var=X_var,
        T=T,
        subj=np.array(dataset.subject_index),
        subject_ids=dataset.subject_ids,
        mean_names=[t.name for t in spec.mean_covariates],
        var_names=[t.name for t in spec.variance_covariates],
        miss_names=[t.name for t in spec.missing_covariates],
        covariate_missing=cov_missing,
        day=np.array(dataset.day),
        beep=np.array(dataset.beep),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _is_missing_token(cell, sentinels):
    c = cell.strip()
    return any(c.lower() == s.lower() for s in sentinels)


def ingest_csv(path, schema=None, sentinels=DEFAULT_SENTINELS, missingness_covariate_names=("day", "beep")):
    """Read a one-row-per-occasion CSV into a :class:`PanelDataset`.

    ``schema`` maps column name to role: ``"variable"`` (default for
    unlisted columns), ``"ignore"``, or one of the label roles ``"subject"``,
    ``"day"``, ``"beep"`` to rename a label column. Missing sentinels are
    compared case-insensitively after stripping whitespace.
    """
    schema = dict(schema or {})
    label_map = {role: col for col, role in schema.items() if role in LABEL_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        idx = {h: k for k, h in enumerate(header)}
        cols = {}
        for role in LABEL_COLUMNS:
            name = label_map.get(role, role)
            if name not in idx:
                raise ParseError(f"required column {name!r} not in header", line=1)
            cols[role] = idx[name]
        var_cols = [
            h for h in header
            if h not in {header[cols[r]] for r in LABEL_COLUMNS} and schema.get(h, "variable") == "variable"
        ]
        for h, role in schema.items():
            if role == "variable" and h not in idx:
                raise UnknownVariable(h)
        subject, day, beep = [], [], []
        data = {v: [] for v in var_cols}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise RaggedRow(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            sid = row[cols["subject"]].strip()
            if not sid:
                raise ParseError("empty subject id", line=lineno)
            subject.append(sid)
            for role, target in (("day", day), ("beep", beep)):
                cell = row[cols[role]].strip()
                try:
                    val = float(cell)
                    if not val.is_integer():
                        raise ValueError
                    target.append(int(val))
                except ValueError:
                    raise ParseError(f"{role} must be an integer, got {cell!r}", line=lineno) from None
            for v in var_cols:
                cell = row[idx[v]]
                if _is_missing_token(cell, sentinels):
                    data[v].append(np.nan)
                    continue
                try:
                    val = float(cell)
                except ValueError:
                    raise ParseError(f"column {v!r}: cannot parse {cell!r}", line=lineno) from None
                if not math.isfinite(val):
                    raise ParseError(f"column {v!r}: non-finite value {cell!r}", line=lineno)
                data[v].append(val)
    if not subject:
        raise ParseError("no data rows", line=2)
    return PanelDataset(subject, day, beep, data, missingness_covariate_names=missingness_covariate_names)


def format_float(x):
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def export_csv(dataset, path, missing_token="NA", variables=None):
    """Write ``dataset`` as ``subject,day,beep,<variables>`` rows (atomically)."""
    variables = list(variables or dataset.variable_names)
    sids = dataset.subject_ids
    rows = [["subject", "day", "beep", *variables]]
    cols = [dataset.column(v) for v in variables]
    for r in range(dataset.n_rows):
        line = [sids[dataset.subject_index[r]], str(int(dataset.day[r])), str(int(dataset.beep[r]))]
        for c in cols:
            line.append(missing_token if math.isnan(c[r]) else format_float(c[r]))
        rows.append(line)
    write_csv_rows(path, rows)


def write_csv_rows(path, rows):
    """Write rows to ``path`` through a temp file + rename."""
    write_text_atomic(path, _rows_to_text(rows))


def _rows_to_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def write_text_atomic(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
