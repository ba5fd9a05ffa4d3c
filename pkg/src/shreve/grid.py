"""Superpixel grid geometry: coordinates, eye mirroring, pairwise distances.

The measurement device reports thickness averaged over *superpixels* laid out
on a regular ``full_rows x full_cols`` grid. Analysis uses an inner window of
that grid (the outer ring is noisy), with superpixels identified by
``row.col`` labels and located at integer coordinates in grid units. All
spatial covariances downstream are functions of the Euclidean distances
between these coordinates.
"""
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SuperpixelGrid",
    "build_inner_grid",
    "mirror_left_eye",
    "pairwise_distances",
]


@dataclass(frozen=True)
class SuperpixelGrid:
    """Rectangular window of superpixels in a fixed canonical order.

    The canonical order is row-major over the included window (all columns of
    the lowest row first) and is stable across runs; every covariance matrix,
    draw file, and report indexes superpixels in this order.

    Attributes
    ----------
    rows, cols : int
        Extent of the window.
    labels : tuple of (int, int)
        ``(row, col)`` pairs in canonical order, 1-based as printed on scans.
    coordinates : ndarray, shape (K, 2)
        Integer-valued grid positions, one row per superpixel.
    """

    rows: int
    cols: int
    labels: tuple
    coordinates: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("superpixel labels must be unique")
        coords = np.asarray(self.coordinates, dtype=float)
        if coords.shape != (len(self.labels), 2):
            raise ValueError("coordinates must be one 2-vector per superpixel")
        if not np.all(coords == np.round(coords)):
            raise ValueError("coordinates must be integer-valued grid positions")
        object.__setattr__(self, "coordinates", coords)

    @property
    def n_superpixels(self):
        return len(self.labels)

    @property
    def label_strings(self):
        """Labels serialized as ``"row.col"`` strings (file format)."""
        return [f"{r}.{c}" for r, c in self.labels]

    def _lookup(self):
        try:
            return self._index
        except AttributeError:
            object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})
            return self._index

    def index_of(self, row, col):
        """Canonical index of superpixel ``(row, col)``; KeyError if outside."""
        return self._lookup()[(row, col)]

    def contains(self, row, col):
        return (row, col) in self._lookup()


def build_inner_grid(full_rows, full_cols, trim):
    """Construct the analysis window obtained by trimming the outer rings.

    Parameters
    ----------
    full_rows, full_cols : int
        Dimensions of the device's full grid.
    trim : int
        Number of rings to discard on every side. ``trim=1`` on an 8x8 grid
        keeps the central 6x6 window (rows and columns 2-7).

    Returns
    -------
    SuperpixelGrid
    """
    if trim < 0:
        raise ValueError("trim must be nonnegative")
    rows = full_rows - 2 * trim
    cols = full_cols - 2 * trim
    if rows < 1 or cols < 1:
        raise ValueError(
            f"trim={trim} leaves no superpixels on a {full_rows}x{full_cols} grid"
        )
    labels = []
    for r in range(1 + trim, full_rows - trim + 1):
        for c in range(1 + trim, full_cols - trim + 1):
            labels.append((r, c))
    coords = np.array(labels, dtype=float)
    return SuperpixelGrid(rows=rows, cols=cols, labels=tuple(labels), coordinates=coords)


def mirror_left_eye(row, col, full_cols):
    """Map a left-eye superpixel into right-eye orientation.

    Left eyes are mirror images of right eyes; flipping them left-right puts
    every eye in a common orientation for analysis. Rows are unchanged,
    columns reflect about the vertical midline of the *full* grid.
    """
    if not 1 <= col <= full_cols:
        raise ValueError(f"column {col} outside 1..{full_cols}")
    if row < 1:
        raise ValueError(f"row {row} must be >= 1")
    return row, full_cols + 1 - col


def pairwise_distances(grid):
    """Euclidean distance matrix between superpixel coordinates, grid units.

    Returns
    -------
    ndarray, shape (K, K)
        Symmetric, zero diagonal.
    """
    coords = grid.coordinates
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))
