"""Domain types and counting-process expansion of staggered-adoption data.

A subject is observed as ``(x, A, U, delta)``: covariates, adoption time
(``inf`` when treatment is never adopted), observed time ``U = min(T, C)``
and the event indicator. Treatment status at time ``t`` is
``W(t) = 1(A < t)``, so a subject adopting inside its follow-up window is
split into an untreated interval ``(0, A]`` and a treated interval
``(A, U]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SubjectRecord",
    "EpisodeRow",
    "EpisodeTable",
    "Dataset",
    "FitResult",
    "expand_to_episodes",
    "expand_dataset",
    "risk_set",
    "read_dataset_csv",
    "write_dataset_csv",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectRecord:
    id: int
    x: np.ndarray
    adoption_time: float
    observed_time: float
    event: bool

    def __post_init__(self):
        x = _frozen(np.array(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "adoption_time", float(self.adoption_time))
        object.__setattr__(self, "observed_time", float(self.observed_time))
        object.__setattr__(self, "event", bool(self.event))
        if not self.observed_time > 0 or not math.isfinite(self.observed_time):
            raise ValueError(f"subject {self.id}: observed_time must be finite and > 0")
        if not self.adoption_time >= 0:
            raise ValueError(f"subject {self.id}: adoption_time must be >= 0")


@dataclass(frozen=True)
class EpisodeRow:
    """One ``(start, stop]`` interval with constant treatment status."""

    subject_id: int
    start: float
    stop: float
    event: bool
    treated: bool
    z: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        if not self.start < self.stop:
            raise ValueError("episode requires start < stop")


@dataclass(frozen=True)
class FitResult:
    beta: np.ndarray
    log_pl: float
    n_iterations: int
    converged: bool
    gradient_norm: float
    standard_errors: np.ndarray | None = None
    message: str = ""


def expand_to_episodes(subject: SubjectRecord) -> list[EpisodeRow]:
    """Split one subject into counting-process episodes.

    Adoption exactly at the observed time contributes no treated exposure,
    because ``W(t) = 1(A < t)`` is strict.
    """
    a, u = subject.adoption_time, subject.observed_time
    if a == 0.0:
        return [EpisodeRow(subject.id, 0.0, u, subject.event, True, subject.x)]
    if a >= u:
        return [EpisodeRow(subject.id, 0.0, u, subject.event, False, subject.x)]
    return [
        EpisodeRow(subject.id, 0.0, a, False, False, subject.x),
        EpisodeRow(subject.id, a, u, subject.event, True, subject.x),
    ]


def risk_set(episodes: Iterable[EpisodeRow], t: float) -> set[int]:
    """Ids of subjects with an episode satisfying ``start < t <= stop``."""
    return {e.subject_id for e in episodes if e.start < t <= e.stop}


@dataclass(frozen=True)
class EpisodeTable:
    """Column-oriented episodes of a whole dataset.

    ``subject`` holds the row position of the owning subject in the source
    :class:`Dataset` (not its id), so covariates can be gathered with
    ``data.X[table.subject]``.
    """

    subject: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    treated: np.ndarray

    def __len__(self) -> int:
        return self.subject.shape[0]

    def rows(self, data: "Dataset", z: np.ndarray | None = None,
             offset: np.ndarray | None = None) -> list[EpisodeRow]:
        zz = data.X[self.subject] if z is None else np.asarray(z, dtype=float)
        off = np.zeros(len(self)) if offset is None else np.asarray(offset, dtype=float)
        return [
            EpisodeRow(int(data.ids[s]), float(a), float(b), bool(e), bool(w), zz[k], float(off[k]))
            for k, (s, a, b, e, w) in enumerate(
                zip(self.subject, self.start, self.stop, self.event, self.treated))
        ]


def expand_dataset(data: "Dataset") -> EpisodeTable:
    """Vectorised :func:`expand_to_episodes` over every subject."""
    n = len(data)
    A, U, d = data.A, data.U, data.event
    split = (A > 0) & (A < U)
    treated_whole = A == 0
    idx = np.arange(n)
    first_stop = np.where(split, A, U)
    first_event = np.where(split, False, d)
    first_treated = treated_whole
    sidx = idx[split]
    subject = np.concatenate([idx, sidx])
    start = np.concatenate([np.zeros(n), A[split]])
    stop = np.concatenate([first_stop, U[split]])
    event = np.concatenate([first_event, d[split]])
    treated = np.concatenate([first_treated, np.ones(sidx.size, dtype=bool)])
    order = np.lexsort((start, subject))
    return EpisodeTable(*(_frozen(np.ascontiguousarray(c[order]))
                          for c in (subject, start, stop, event, treated)))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of subjects stored column-wise."""

    ids: np.ndarray
    X: np.ndarray
    A: np.ndarray
    U: np.ndarray
    event: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if ids.size != 1 else X.reshape(1, -1)
        A = np.asarray(self.A, dtype=float).reshape(-1)
        U = np.asarray(self.U, dtype=float).reshape(-1)
        ev = np.asarray(self.event).astype(bool).reshape(-1)
        n = ids.size
        if not (X.shape[0] == A.size == U.size == ev.size == n):
            raise ValueError("column lengths disagree")
        if np.unique(ids).size != n:
            raise ValueError("subject ids must be unique")
        if n and (np.any(~np.isfinite(U)) or np.any(U <= 0)):
            raise ValueError("observed_time must be finite and > 0")
        if n and (np.any(np.isnan(A)) or np.any(A < 0)):
            raise ValueError("adoption_time must be >= 0 (inf allowed)")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("column_names must match covariate dimension")
        for k, v in dict(ids=ids, X=X, A=A, U=U, event=ev).items():
            object.__setattr__(self, k, _frozen(np.array(v)))
        object.__setattr__(self, "column_names", names)

    @classmethod
    def from_records(cls, subjects: Sequence[SubjectRecord],
                     column_names: Sequence[str] = ()) -> "Dataset":
        if not subjects:
            raise ValueError("empty dataset")
        p = subjects[0].x.size
        if any(s.x.size != p for s in subjects):
            raise ValueError("covariate length differs between records")
        return cls(
            ids=[s.id for s in subjects],
            X=np.vstack([s.x for s in subjects]),
            A=[s.adoption_time for s in subjects],
            U=[s.observed_time for s in subjects],
            event=[s.event for s in subjects],
            column_names=tuple(column_names),
        )

    def __len__(self) -> int:
        return self.ids.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [SubjectRecord(int(i), x, a, u, e)
                for i, x, a, u, e in zip(self.ids, self.X, self.A, self.U, self.event)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.ids[index], self.X[index], self.A[index], self.U[index],
                       self.event[index], self.column_names)

    def with_columns(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return Dataset(self.ids, self.X[:, cols], self.A, self.U, self.event,
                       tuple(self.column_names[c] for c in cols))

    def treated_at(self, t) -> np.ndarray:
        """``W(t) = 1(A < t)`` for every subject; ``t`` broadcasts."""
        return self.A < t


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def write_dataset_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *data.column_names, "adoption_time", "observed_time", "event"])
        for i in range(len(data)):
            w.writerow([int(data.ids[i]), *(_fmt(v) for v in data.X[i]),
                        _fmt(data.A[i]), _fmt(data.U[i]), int(data.event[i])])


def read_dataset_csv(path: str | Path) -> Dataset:
    """Read the ``id, <covariates...>, adoption_time, observed_time, event`` layout."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        tail = ["adoption_time", "observed_time", "event"]
        if header[0] != "id" or header[-3:] != tail:
            raise ValueError(f"{path}: unexpected header {header}")
        names = header[1:-3]
        ids, X, A, U, E = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
                X.append([float(v) for v in row[1:-3]])
                A.append(float(row[-3]))
                U.append(float(row[-2]))
                ev = int(row[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if ev not in (0, 1):
                raise ValueError(f"{path}:{lineno}: event must be 0 or 1")
            E.append(ev)
    return Dataset(ids, np.array(X, dtype=float).reshape(len(ids), len(names)), A, U, E, names)
