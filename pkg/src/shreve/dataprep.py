"""Data ingestion and cleaning: zero removal and consecutive-visit outliers.

The cleaning pipeline mirrors clinical practice for longitudinal thickness
profiles: measurements of exactly zero are device errors and are dropped
outright; spikes between consecutive visits are detected from the pair of
thresholds (absolute difference, centered slope) and removed one point at a
time, preferring the deletion that most reduces the profile's total
visit-to-visit variation. A profile that produces two or more outliers is
considered unreliable from the first outlier onward.
"""
import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import CSV_COLUMNS, LongitudinalGridData
from .grid import mirror_left_eye

__all__ = [
    "CleaningConfig",
    "CleaningReport",
    "ingest",
    "remove_zeros",
    "flag_outlier_pairs",
    "remove_outliers",
    "clean_dataset",
]


@dataclass(frozen=True)
class CleaningConfig:
    """Thresholds for the consecutive-visit outlier rule.

    A pair of consecutive observations is flagged when the absolute
    difference exceeds ``diff_threshold`` microns AND the absolute centered
    slope ``|dy/dt - slope_center|`` exceeds ``slope_threshold`` microns/year.
    ``two_outlier_action`` selects what happens once a profile yields two
    outliers: ``"truncate"`` keeps observations before the first outlier,
    ``"drop"`` discards the whole profile.
    """

    diff_threshold: float = 5.0
    slope_threshold: float = 24.0
    slope_center: float = -0.5
    two_outlier_action: str = "truncate"

    def __post_init__(self):
        if self.two_outlier_action not in ("truncate", "drop"):
            raise ValueError(f"unknown two_outlier_action {self.two_outlier_action!r}")


@dataclass
class CleaningReport:
    """Audit record of what cleaning removed."""

    zeros_removed: int = 0
    outliers_removed: list = field(default_factory=list)  # (subject_id, visit_1based, label)
    profiles_truncated: list = field(default_factory=list)  # (subject_id, label, from_visit_1based)
    dropped_outside_grid: int = 0
    input_records: int = 0
    output_records: int = 0

    def summary(self):
        return {
            "input_records": self.input_records,
            "output_records": self.output_records,
            "zeros_removed": self.zeros_removed,
            "outliers_removed": len(self.outliers_removed),
            "profiles_truncated": len(self.profiles_truncated),
            "dropped_outside_grid": self.dropped_outside_grid,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "subject_id", "superpixel", "visit"])
            for sid, visit, lab in self.outliers_removed:
                writer.writerow(["outlier", sid, lab, visit])
            for sid, lab, from_visit in self.profiles_truncated:
                writer.writerow(["truncation_from", sid, lab, from_visit])


def ingest(path, grid, full_rows=8, full_cols=8):
    """Read raw records, mirror left eyes, and drop out-of-window superpixels.

    Parameters
    ----------
    path : str
        CSV file with header ``subject_id,eye,visit_index,time_years,row,col,
        thickness_um``.
    grid : SuperpixelGrid
        Analysis window (e.g. the central 6x6 of an 8x8 device grid).
    full_rows, full_cols : int
        Device grid dimensions; the column mirror for left eyes reflects
        within the full grid.

    Returns
    -------
    (LongitudinalGridData, CleaningReport)
        The report carries ingest-stage counts; cleaning proper fills in the
        rest.
    """
    report = CleaningReport()
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(CSV_COLUMNS):
            raise ValueError(
                f"{path}: expected header columns {list(CSV_COLUMNS)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = row["subject_id"].strip()
                eye = row["eye"].strip().upper()
                vidx = int(row["visit_index"])
                time = float(row["time_years"])
                r = int(row["row"])
                c = int(row["col"])
                y = float(row["thickness_um"])
            except (TypeError, ValueError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if eye not in ("OD", "OS"):
                raise ValueError(f"{path}:{lineno}: eye must be OD or OS, got {eye!r}")
            if time < 0:
                raise ValueError(f"{path}:{lineno}: negative time {time}")
            if y < 0:
                raise ValueError(f"{path}:{lineno}: negative thickness {y}")
            if eye == "OS":
                r, c = mirror_left_eye(r, c, full_cols)
            report.input_records += 1
            if not grid.contains(r, c):
                report.dropped_outside_grid += 1
                continue
            records.append((sid, vidx, time, grid.index_of(r, c), y))
    try:
        data = LongitudinalGridData.from_records(grid, records)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    report.output_records = data.n_obs
    return data, report


def remove_zeros(data):
    """Drop all records with thickness exactly zero; returns (data, count)."""
    keep = data.y != 0.0
    count = int(np.count_nonzero(~keep))
    return data.subset(keep), count


def flag_outlier_pairs(t, y, config=CleaningConfig()):
    """Indices ``(j-1, j)`` of consecutive pairs flagged as outlier candidates.

    The slope is centered before thresholding: with the default center of
    -0.5 microns/year the test is ``|dy/dt + 0.5| > 24``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    flagged = []
    for j in range(1, len(y)):
        dt = t[j] - t[j - 1]
        if dt <= 0:
            raise ValueError("profile times must be strictly increasing")
        dy = y[j] - y[j - 1]
        if abs(dy) > config.diff_threshold and abs(dy / dt - config.slope_center) > config.slope_threshold:
            flagged.append((j - 1, j))
    return flagged


def _abs_diff_sum(y):
    return float(np.sum(np.abs(np.diff(y)))) if len(y) > 1 else 0.0


def remove_outliers(t, y, config=CleaningConfig()):
    """Iteratively remove outlier points from one profile.

    Each round flags consecutive-visit pairs, then removes the single
    candidate point whose deletion most reduces the profile's sum of
    absolute visit differences (ties resolved to the earliest visit).
    Rounds repeat on the reduced profile until nothing is flagged. If a
    second outlier is ever identified the profile is truncated from the
    first outlier onward (or dropped entirely, per configuration).

    Returns
    -------
    keep : ndarray of bool, shape (len(y),)
        Mask over the original observations.
    removed : list of int
        Original indices removed as outliers, in removal order.
    truncated : bool
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    active = list(range(len(y)))
    removed = []
    truncated = False
    while True:
        flags = flag_outlier_pairs(t[active], y[active], config)
        if not flags:
            break
        candidates = sorted({pos for pair in flags for pos in pair})
        base = _abs_diff_sum(y[active])
        best_pos, best_reduction = None, -np.inf
        for pos in candidates:
            trial = y[[a for idx, a in enumerate(active) if idx != pos]]
            reduction = base - _abs_diff_sum(trial)
            if reduction > best_reduction + 1e-12:
                best_pos, best_reduction = pos, reduction
        removed.append(active.pop(best_pos))
        if len(removed) >= 2:
            truncated = True
            break
    keep = np.zeros(len(y), dtype=bool)
    keep[active] = True
    if truncated:
        first = min(removed)
        if config.two_outlier_action == "drop":
            keep[:] = False
        else:
            keep[first:] = False
    keep[removed] = False
    return keep, removed, truncated


def clean_dataset(data, config=CleaningConfig(), report=None):
    """Full cleaning pipeline: zero removal then per-profile outlier removal.

    Profiles are the (subject, superpixel) observation sequences ordered by
    visit. Returns ``(cleaned_data, report)``.
    """
    if report is None:
        report = CleaningReport(input_records=data.n_obs)
    data, zeros = remove_zeros(data)
    report.zeros_removed = zeros
    if data.n_obs == 0:
        report.output_records = 0
        return data, report
    keep = np.ones(data.n_obs, dtype=bool)
    order = np.lexsort((data.visit, data.k, data.subj))
    boundaries = np.flatnonzero(
        (np.diff(data.subj[order]) != 0) | (np.diff(data.k[order]) != 0)
    )
    starts = np.concatenate([[0], boundaries + 1])
    ends = np.concatenate([boundaries + 1, [data.n_obs]])
    for s, e in zip(starts, ends):
        idx = order[s:e]
        if len(idx) < 2:
            continue
        prof_keep, removed, truncated = remove_outliers(data.t[idx], data.y[idx], config)
        if not removed:
            continue
        i = int(data.subj[idx[0]])
        lab = data.grid.label_strings[int(data.k[idx[0]])]
        sid = data.subject_ids[i]
        for pos in removed:
            report.outliers_removed.append((sid, int(data.visit[idx[pos]]) + 1, lab))
        if truncated:
            dropped = np.flatnonzero(~prof_keep)
            from_visit = int(data.visit[idx[dropped.min()]]) + 1
            report.profiles_truncated.append((sid, lab, from_visit))
        keep[idx[~prof_keep]] = False
    cleaned = data.subset(keep)
    report.output_records = cleaned.n_obs
    return cleaned, report
