"""Loading and validation of two-condition reading-time datasets.

A dataset is a table of trials with crossed subject and item labels, a
sum-coded condition (+1 / -1) and a strictly positive reading time in
milliseconds.  Labels are remapped to dense indices in first-appearance
order at load time.
"""

from __future__ import annotations

import csv
import hashlib
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("subject", "item", "condition", "rt")


class DataError(ValueError):
    """Raised for malformed or invalid reading-time data."""


class SchemaError(DataError):
    """Raised when a required CSV column is missing."""


@dataclass(frozen=True)
class Trial:
    subject: int
    item: int
    condition: int
    rt: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of trials.

    Indices are stored 0-based in numpy arrays; ``subject_labels[k]`` is
    the original label of subject index ``k`` (reported 1-based as
    ``u[k+1]``).
    """

    subject: np.ndarray
    item: np.ndarray
    condition: np.ndarray
    rt: np.ndarray
    n_subjects: int
    n_items: int
    subject_labels: tuple = ()
    item_labels: tuple = ()
    log_rt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        subject = np.ascontiguousarray(self.subject, dtype=np.int64)
        item = np.ascontiguousarray(self.item, dtype=np.int64)
        condition = np.ascontiguousarray(self.condition, dtype=np.int64)
        rt = np.ascontiguousarray(self.rt, dtype=np.float64)
        n = rt.shape[0]
        if not (subject.shape == item.shape == condition.shape == (n,)):
            raise DataError("trial columns must be 1-D arrays of equal length")
        if n == 0:
            raise DataError("dataset has no trials")
        if not np.all(np.isfinite(rt)) or np.any(rt <= 0):
            raise DataError("reading times must be finite and strictly positive")
        if not np.all(np.isin(condition, (1, -1))):
            raise DataError("condition must be +1 or -1")
        if subject.min() < 0 or subject.max() >= self.n_subjects:
            raise DataError("subject index out of range")
        if item.min() < 0 or item.max() >= self.n_items:
            raise DataError("item index out of range")
        for arr in (subject, item, condition, rt):
            arr.setflags(write=False)
        object.__setattr__(self, "subject", subject)
        object.__setattr__(self, "item", item)
        object.__setattr__(self, "condition", condition)
        object.__setattr__(self, "rt", rt)
        log_rt = np.log(rt)
        log_rt.setflags(write=False)
        object.__setattr__(self, "log_rt", log_rt)
        if not self.subject_labels:
            object.__setattr__(
                self, "subject_labels", tuple(str(k + 1) for k in range(self.n_subjects))
            )
        if not self.item_labels:
            object.__setattr__(
                self, "item_labels", tuple(str(k + 1) for k in range(self.n_items))
            )

    @classmethod
    def from_arrays(cls, subject, item, condition, rt, n_subjects=None, n_items=None,
                    subject_labels=(), item_labels=()):
        """Build and fully validate a dataset from 0-based index arrays."""
        subject = np.asarray(subject)
        item = np.asarray(item)
        n_subjects = int(subject.max()) + 1 if n_subjects is None else n_subjects
        n_items = int(item.max()) + 1 if n_items is None else n_items
        d = cls(subject, item, condition, rt, n_subjects, n_items,
                tuple(subject_labels), tuple(item_labels))
        d.validate()
        return d

    def validate(self):
        """Check the whole-table invariants (coverage, both conditions)."""
        missing = np.setdiff1d(np.arange(self.n_subjects), self.subject)
        if missing.size:
            raise DataError(f"subject index {missing[0] + 1} has no trials")
        missing = np.setdiff1d(np.arange(self.n_items), self.item)
        if missing.size:
            raise DataError(f"item index {missing[0] + 1} has no trials")
        if not (np.any(self.condition == 1) and np.any(self.condition == -1)):
            raise DataError("both conditions (+1 and -1) must occur at least once")
        pairs = self.subject * self.n_items + self.item
        if np.unique(pairs).size < pairs.size:
            warnings.warn("repeated (subject, item) pairs present", stacklevel=2)

    def __len__(self):
        return self.rt.shape[0]

    @property
    def n_trials(self):
        return len(self)

    def trial(self, k) -> Trial:
        return Trial(int(self.subject[k]) + 1, int(self.item[k]) + 1,
                     int(self.condition[k]), float(self.rt[k]))

    def __iter__(self):
        return (self.trial(k) for k in range(len(self)))

    def subset(self, indices) -> "Dataset":
        """Rows ``indices`` in the given order, keeping the subject/item dimensions.

        The coverage invariants are not re-checked: held-out subsets
        (leave-one-out) may leave a subject or item without trials, whose
        intercept is then informed by its prior alone.
        """
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        return Dataset(self.subject[idx], self.item[idx], self.condition[idx],
                       self.rt[idx], self.n_subjects, self.n_items,
                       self.subject_labels, self.item_labels)

    def without(self, k) -> "Dataset":
        return self.subset(np.delete(np.arange(len(self)), k))

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CSV serialization."""
        return hashlib.sha256(to_csv_string(self).encode("utf-8")).hexdigest()


def condition_split(d: Dataset):
    """Return (indices of +1 trials, indices of -1 trials), 0-based, in trial order."""
    return np.flatnonzero(d.condition == 1), np.flatnonzero(d.condition == -1)


def _parse_condition(raw, line):
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"condition must be +1 or -1, line {line}") from None
    if value not in (1.0, -1.0):
        raise DataError(f"condition must be +1 or -1, line {line}")
    return int(value)


def _parse_rt(raw, line):
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"non-numeric reading time {raw!r}, line {line}") from None
    if not np.isfinite(value):
        raise DataError(f"non-finite reading time, line {line}")
    if value <= 0:
        raise DataError(f"non-positive reading time, line {line}")
    return value


def read_csv(stream) -> Dataset:
    """Parse a ``subject,item,condition,rt`` table from an open text stream.

    Line numbers in error messages count the header as line 1.
    """
    reader = csv.DictReader(stream)
    header = [h.strip() for h in (reader.fieldnames or [])]
    for col in COLUMNS:
        if col not in header:
            raise SchemaError(f"missing column {col!r}")
    reader.fieldnames = header

    subj_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    subject, item, condition, rt = [], [], [], []
    for row in reader:
        line = reader.line_num
        if all(v is None or not str(v).strip() for v in row.values()):
            continue
        s = str(row["subject"]).strip()
        i = str(row["item"]).strip()
        if not s or not i:
            raise DataError(f"empty subject or item label, line {line}")
        subject.append(subj_index.setdefault(s, len(subj_index)))
        item.append(item_index.setdefault(i, len(item_index)))
        condition.append(_parse_condition(str(row["condition"]).strip(), line))
        rt.append(_parse_rt(str(row["rt"]).strip(), line))
    if not rt:
        raise DataError("no trials in file")
    return Dataset.from_arrays(
        subject, item, condition, rt,
        n_subjects=len(subj_index), n_items=len(item_index),
        subject_labels=tuple(subj_index), item_labels=tuple(item_index),
    )


def load_csv(path) -> Dataset:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return read_csv(fh)


def to_csv_string(d: Dataset) -> str:
    buf = io.StringIO()
    write_csv_stream(d, buf)
    return buf.getvalue()


def write_csv_stream(d: Dataset, stream):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS)
    for k in range(len(d)):
        writer.writerow((
            d.subject_labels[d.subject[k]],
            d.item_labels[d.item[k]],
            "+1" if d.condition[k] == 1 else "-1",
            repr(float(d.rt[k])),
        ))


def write_csv(d: Dataset, path):
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        write_csv_stream(d, fh)
