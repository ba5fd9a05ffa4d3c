"""Longitudinal grid data container and the CSV record schema.

Observations are ragged: subject i is seen at visits j = 1..J_i (times in
years, first visit at 0 within subject) and each visit carries at most one
thickness measurement per superpixel; any (subject, visit, superpixel)
combination may be missing. Records are stored flat, sorted canonically by
(subject, visit, superpixel index), and that record order is the contract
for every pointwise log-likelihood matrix and draw file downstream.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LongitudinalGridData", "CSV_COLUMNS", "write_csv"]

CSV_COLUMNS = ("subject_id", "eye", "visit_index", "time_years", "row", "col", "thickness_um")


@dataclass
class LongitudinalGridData:
    """Ragged longitudinal observations over a superpixel grid.

    Attributes
    ----------
    grid : SuperpixelGrid
        Analysis window; superpixel indices below refer to its canonical order.
    subject_ids : list of str
    visit_times : list of ndarray
        Per subject, strictly increasing times in years with first entry 0.
    subj, visit, k : ndarray of int64, shape (N,)
        Subject index, within-subject visit index (0-based), superpixel index.
    t, y : ndarray of float, shape (N,)
        Observation times (years) and thickness values (microns).
    """

    grid: object
    subject_ids: list
    visit_times: list
    subj: np.ndarray = field(repr=False)
    visit: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.subj = np.asarray(self.subj, dtype=np.int64)
        self.visit = np.asarray(self.visit, dtype=np.int64)
        self.k = np.asarray(self.k, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_records(cls, grid, records):
        """Build from an iterable of (subject_id, visit_index, time, k, y) tuples.

        ``visit_index`` values need only be ordered consistently with time
        within subject; they are reindexed densely from 0. Subject order is
        first appearance; times are shifted so each subject starts at 0.
        """
        by_subject = {}
        for sid, vidx, time, k_idx, y_val in records:
            by_subject.setdefault(str(sid), []).append((int(vidx), float(time), int(k_idx), float(y_val)))
        subject_ids = list(by_subject)
        visit_times = []
        subj, visit, kk, tt, yy = [], [], [], [], []
        for i, sid in enumerate(subject_ids):
            recs = by_subject[sid]
            vidx_times = {}
            for vidx, time, _, _ in recs:
                if vidx in vidx_times and vidx_times[vidx] != time:
                    raise ValueError(f"subject {sid}: visit {vidx} has conflicting times")
                vidx_times[vidx] = time
            order = sorted(vidx_times, key=lambda v: (vidx_times[v], v))
            times = np.array([vidx_times[v] for v in order], dtype=float)
            times = times - times.min()
            dense = {v: j for j, v in enumerate(order)}
            visit_times.append(times)
            seen = set()
            for vidx, _, k_idx, y_val in sorted(recs, key=lambda r: (dense[r[0]], r[2])):
                key = (dense[vidx], k_idx)
                if key in seen:
                    raise ValueError(
                        f"duplicate observation for subject {sid}, visit {vidx}, superpixel {k_idx}"
                    )
                seen.add(key)
                subj.append(i)
                visit.append(dense[vidx])
                kk.append(k_idx)
                tt.append(times[dense[vidx]])
                yy.append(y_val)
        return cls(
            grid=grid,
            subject_ids=subject_ids,
            visit_times=visit_times,
            subj=np.array(subj, dtype=np.int64),
            visit=np.array(visit, dtype=np.int64),
            k=np.array(kk, dtype=np.int64),
            t=np.array(tt, dtype=float),
            y=np.array(yy, dtype=float),
        )

    # -- invariants --------------------------------------------------------

    def validate(self):
        n = len(self.subject_ids)
        if len(self.visit_times) != n:
            raise ValueError("visit_times must align with subject_ids")
        for sid, times in zip(self.subject_ids, self.visit_times):
            if len(times) == 0:
                raise ValueError(f"subject {sid} has no visits")
            if times[0] != 0.0:
                raise ValueError(f"subject {sid}: first visit time must be 0")
            if np.any(np.diff(times) <= 0):
                raise ValueError(f"subject {sid}: visit times must be strictly increasing")
        if not (len(self.subj) == len(self.visit) == len(self.k) == len(self.t) == len(self.y)):
            raise ValueError("observation arrays must have equal length")
        if self.n_obs:
            if self.subj.min() < 0 or self.subj.max() >= n:
                raise ValueError("subject index out of range")
            if self.k.min() < 0 or self.k.max() >= self.grid.n_superpixels:
                raise ValueError("superpixel index out of range")
            for i in range(n):
                mask = self.subj == i
                if np.any(self.visit[mask] >= len(self.visit_times[i])):
                    raise ValueError(f"subject {self.subject_ids[i]}: visit index out of range")
            if np.any(self.y < 0):
                raise ValueError("thickness values must be nonnegative")
            order = np.lexsort((self.k, self.visit, self.subj))
            if not np.array_equal(order, np.arange(self.n_obs)):
                raise ValueError("observations must be sorted by (subject, visit, superpixel)")
            key = (self.subj * (self.visit.max() + 1) + self.visit) * self.grid.n_superpixels + self.k
            if len(np.unique(key)) != self.n_obs:
                raise ValueError("duplicate (subject, visit, superpixel) observation")

    # -- basic queries -----------------------------------------------------

    @property
    def n_subjects(self):
        return len(self.subject_ids)

    @property
    def n_obs(self):
        return len(self.y)

    def n_visits(self, i):
        return len(self.visit_times[i])

    def require_positive(self):
        """Raise if any thickness is zero (modeling requires cleaned data)."""
        if self.n_obs and np.any(self.y <= 0):
            raise ValueError("data contains zero thickness values; run cleaning first")

    # -- derived datasets --------------------------------------------------

    def subset(self, keep_mask):
        """New dataset keeping the flagged observations; visit metadata intact."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        return LongitudinalGridData(
            grid=self.grid,
            subject_ids=list(self.subject_ids),
            visit_times=[t.copy() for t in self.visit_times],
            subj=self.subj[keep_mask].copy(),
            visit=self.visit[keep_mask].copy(),
            k=self.k[keep_mask].copy(),
            t=self.t[keep_mask].copy(),
            y=self.y[keep_mask].copy(),
        )

    def with_values(self, y):
        """New dataset with the same design but replaced thickness values."""
        out = self.subset(np.ones(self.n_obs, dtype=bool))
        out.y = np.asarray(y, dtype=float).copy()
        out.validate()
        return out

    def equals(self, other):
        return (
            self.subject_ids == other.subject_ids
            and all(np.array_equal(a, b) for a, b in zip(self.visit_times, other.visit_times))
            and np.array_equal(self.subj, other.subj)
            and np.array_equal(self.visit, other.visit)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.y, other.y)
        )


def write_csv(data, path):
    """Export a dataset in the raw record schema (right-eye orientation).

    Mirroring has already been applied at ingest, so every record is written
    with ``eye = OD``; visit indices are 1-based as on scan reports.
    """
    labels = data.grid.labels
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i in range(data.n_obs):
            row, col = labels[data.k[i]]
            writer.writerow(
                [
                    data.subject_ids[data.subj[i]],
                    "OD",
                    int(data.visit[i]) + 1,
                    repr(float(data.t[i])),
                    row,
                    col,
                    repr(float(data.y[i])),
                ]
            )
