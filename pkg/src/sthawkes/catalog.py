"""Event catalogs: data model, CSV round-trip and temporal splitting.

Events live in a rectangular observation window [-sx, sx] x [-sy, sy] x [0, t_end].
A catalog holds one event list per process, each sorted by time.  Coordinates
are kept in double precision and never rescaled; callers are expected to map
raw data (e.g. lat/lon/days) to model units beforehand.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CsvFormatError, ValidationError

CSV_HEADER = ("process", "x", "y", "t")


class Event(NamedTuple):
    x: float
    y: float
    t: float


@dataclass(frozen=True)
class Domain:
    """Observation window: space [-sx, sx] x [-sy, sy], time [0, t_end]."""

    sx: float
    sy: float
    t_end: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0 and self.t_end > 0):
            raise ValidationError(f"domain bounds must be positive, got {self}")

    @property
    def volume(self) -> float:
        return (2.0 * self.sx) * (2.0 * self.sy) * self.t_end

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        x, y, t = xyz[:, 0], xyz[:, 1], xyz[:, 2]
        # closed window: boundary events are accepted
        return (
            (np.abs(x) <= self.sx)
            & (np.abs(y) <= self.sy)
            & (t >= 0.0)
            & (t <= self.t_end)
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Catalog:
    """Per-process event arrays of shape (N_i, 3) with columns (x, y, t).

    Immutable after construction; arrays are sorted by time and marked
    read-only, so a catalog can be shared freely across workers.
    """

    processes: tuple
    domain: Domain

    def __post_init__(self):
        if len(self.processes) < 1:
            raise ValidationError("a catalog needs at least one process")
        cleaned = []
        for j, ev in enumerate(self.processes):
            ev = np.asarray(ev, dtype=np.float64).reshape(-1, 3)
            ok = self.domain.contains(ev)
            if not np.all(ok):
                bad = Event(*(float(v) for v in ev[~ok][0]))
                raise ValidationError(
                    f"event outside window in process {j}: "
                    f"(x={bad.x!r}, y={bad.y!r}, t={bad.t!r}), domain={self.domain}"
                )
            ev = ev[np.argsort(ev[:, 2], kind="stable")]
            cleaned.append(_frozen(ev))
        object.__setattr__(self, "processes", tuple(cleaned))

    @property
    def n_processes(self) -> int:
        return len(self.processes)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.processes], dtype=np.int64)

    @property
    def total_events(self) -> int:
        return int(self.counts.sum())


def load_csv(path, domain: Domain, n_processes: int | None = None) -> Catalog:
    """Read a `process,x,y,t` CSV into a validated catalog.

    Process ids must be integers in [0, D); D is inferred from the largest id
    unless `n_processes` is given.  Raises CsvFormatError with the offending
    line number on malformed input and ValidationError for events outside
    the window.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError(f"{path}: empty file")
        if [c.strip() for c in header] != list(CSV_HEADER):
            raise CsvFormatError(
                f"{path}:1: expected header {','.join(CSV_HEADER)!r}, got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CsvFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                pid = int(row[0])
                x, y, t = float(row[1]), float(row[2]), float(row[3])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
            if pid < 0:
                raise CsvFormatError(f"{path}:{lineno}: negative process id {pid}")
            rows.append((pid, x, y, t))
    if not rows:
        raise CsvFormatError(f"{path}: no event rows")
    d_seen = max(r[0] for r in rows) + 1
    d = d_seen if n_processes is None else n_processes
    if d_seen > d:
        raise CsvFormatError(f"{path}: process id {d_seen - 1} exceeds n_processes={d}")
    per_proc = [[] for _ in range(d)]
    for pid, x, y, t in rows:
        per_proc[pid].append((x, y, t))
    arrays = [np.array(p, dtype=np.float64).reshape(-1, 3) for p in per_proc]
    return Catalog(tuple(arrays), domain)


def save_csv(cat: Catalog, path) -> None:
    """Write a catalog back to CSV; values round-trip bit-exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for j, ev in enumerate(cat.processes):
            for x, y, t in ev:
                writer.writerow([j, repr(float(x)), repr(float(y)), repr(float(t))])


def split_temporal(cat: Catalog, fraction: float) -> tuple[Catalog, Catalog]:
    """Split at t = fraction * t_end; the test side is shifted to start at 0.

    Events exactly at the cut point go to the training side.  An empty side
    produces a warning, not an error.
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must lie in (0, 1), got {fraction}")
    cut = fraction * cat.domain.t_end
    train_parts, test_parts = [], []
    for ev in cat.processes:
        left = ev[:, 2] <= cut
        train_parts.append(ev[left])
        shifted = ev[~left].copy()
        shifted[:, 2] -= cut
        test_parts.append(shifted)
    if sum(len(p) for p in train_parts) == 0:
        warnings.warn("temporal split produced an empty training side", stacklevel=2)
    if sum(len(p) for p in test_parts) == 0:
        warnings.warn("temporal split produced an empty test side", stacklevel=2)
    train = Catalog(tuple(train_parts), Domain(cat.domain.sx, cat.domain.sy, cut))
    test = Catalog(
        tuple(test_parts), Domain(cat.domain.sx, cat.domain.sy, cat.domain.t_end - cut)
    )
    return train, test
