"""Sparse voxel grids with per-cell Gaussian statistics and plane tests.

Voxel indices are ``floor(p / leaf)`` componentwise. Internally every index
is packed into one int64 key (21 bits per axis, offset by 2**20), so a
sorted key array doubles as the hash table: lookups are binary searches and
neighbour offsets are plain integer additions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
_MASK = (1 << KEY_BITS) - 1

DEFAULT_LAMBDA_TH = 0.01
DEFAULT_MIN_PTS = 5


class InvalidLeaf(ValueError):
    pass


def pack_keys(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3) + KEY_OFFSET
    if idx.size and (idx.min() < 0 or idx.max() > _MASK):
        raise OverflowError("voxel index outside the packable range")
    return (idx[:, 0] << (2 * KEY_BITS)) | (idx[:, 1] << KEY_BITS) | idx[:, 2]


def unpack_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.size, 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * KEY_BITS)) & _MASK
    out[:, 1] = (keys >> KEY_BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out - KEY_OFFSET


def offset_key(dx, dy, dz) -> int:
    return (int(dx) << (2 * KEY_BITS)) + (int(dy) << KEY_BITS) + int(dz)


def neighbor_offsets(connectivity=26) -> np.ndarray:
    """Packed key deltas for the 6- or 26-neighbourhood (self excluded)."""
    r = (-1, 0, 1)
    offs = [
        (dx, dy, dz)
        for dx in r
        for dy in r
        for dz in r
        if (dx, dy, dz) != (0, 0, 0) and (connectivity == 26 or abs(dx) + abs(dy) + abs(dz) == 1)
    ]
    return np.array([offset_key(*o) for o in offs], dtype=np.int64)


def voxel_indices(points, leaf) -> np.ndarray:
    if not leaf > 0:
        raise InvalidLeaf(f"leaf size must be positive, got {leaf}")
    return np.floor(np.asarray(points, dtype=float) / leaf).astype(np.int64)


def sorted_lookup(sorted_keys, query) -> np.ndarray:
    """Row of each query key in ``sorted_keys``, or -1 when absent."""
    query = np.asarray(query, dtype=np.int64)
    if sorted_keys.size == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    hit = sorted_keys[pos_c] == query
    return np.where(hit, pos_c, -1)


def fix_normal_signs(normals) -> np.ndarray:
    """Flip normals to non-negative z; ties go to +x, then +y."""
    n = np.array(normals, dtype=float, copy=True).reshape(-1, 3)
    flip = (n[:, 2] < 0) | ((n[:, 2] == 0) & ((n[:, 0] < 0) | ((n[:, 0] == 0) & (n[:, 1] < 0))))
    n[flip] *= -1.0
    return n


@dataclass
class VoxelCell:
    points: np.ndarray
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    # descending: lambda_1 >= lambda_2 >= lambda_s
    eigenvalues: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    is_plane: bool = False
    is_ground: bool = False

    @property
    def count(self):
        return len(self.points)


def compute_stats(cell: VoxelCell, min_pts=DEFAULT_MIN_PTS) -> VoxelCell:
    """Centroid and population covariance (1/n normalization)."""
    pts = np.asarray(cell.points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cell has no points")
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d / len(pts)
    cov = 0.5 * (cov + cov.T)
    eig = None
    normal = None
    if len(pts) >= min_pts:
        w, V = np.linalg.eigh(cov)
        eig = np.clip(w[::-1], 0.0, None)
        normal = fix_normal_signs(V[:, 0])[0]
    return VoxelCell(pts, c, cov, eig, normal, False, cell.is_ground)


def classify_plane(cell: VoxelCell, lambda_th=DEFAULT_LAMBDA_TH) -> VoxelCell:
    if cell.eigenvalues is None:
        return VoxelCell(cell.points, cell.centroid, cell.covariance, None, None, False, cell.is_ground)
    is_plane = bool(cell.eigenvalues[2] < lambda_th)
    return VoxelCell(
        cell.points, cell.centroid, cell.covariance, cell.eigenvalues, cell.normal, is_plane, cell.is_ground
    )


class VoxelMap:
    """Completed (read-only) voxel map.

    Per-cell arrays are aligned with ``keys`` (sorted). ``point_cell[i]`` is the
    row owning input point ``i``; ``order``/``starts`` give each row's points
    contiguously.
    """

    def __init__(self, points, leaf, lambda_th=DEFAULT_LAMBDA_TH, min_pts=DEFAULT_MIN_PTS, weights=None):
        pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        idx = voxel_indices(pts, leaf)
        self.leaf = float(leaf)
        self.lambda_th = float(lambda_th)
        self.min_pts = int(min_pts)
        self.points = pts
        all_keys = pack_keys(idx)
        self.keys, self.point_cell, counts = np.unique(all_keys, return_inverse=True, return_counts=True)
        self.point_cell = self.point_cell.reshape(-1)
        self.counts = counts
        self.indices = unpack_keys(self.keys)
        self.order = np.argsort(self.point_cell, kind="stable")
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self._compute_stats()

    def _compute_stats(self):
        m = self.keys.size
        cnt = self.counts.astype(float)
        pc = self.point_cell
        cen = np.empty((m, 3))
        for k in range(3):
            cen[:, k] = np.bincount(pc, weights=self.points[:, k], minlength=m) / cnt
        d = self.points - cen[pc]
        cov = np.empty((m, 3, 3))
        for a in range(3):
            for b in range(a, 3):
                v = np.bincount(pc, weights=d[:, a] * d[:, b], minlength=m) / cnt
                cov[:, a, b] = v
                cov[:, b, a] = v
        self.centroids = cen
        self.covariances = cov
        eig = np.full((m, 3), np.nan)
        normals = np.full((m, 3), np.nan)
        ok = self.counts >= self.min_pts
        if ok.any():
            w, V = np.linalg.eigh(cov[ok])
            eig[ok] = np.clip(w[:, ::-1], 0.0, None)
            normals[ok] = fix_normal_signs(V[:, :, 0])
        self.eigenvalues = eig
        self.normals = normals
        self.is_plane = ok & (np.nan_to_num(eig[:, 2], nan=np.inf) < self.lambda_th)

    # -- hash-table view -------------------------------------------------
    def __len__(self):
        return int(self.keys.size)

    def find(self, keys) -> np.ndarray:
        return sorted_lookup(self.keys, keys)

    def row_of(self, index) -> int:
        return int(self.find(pack_keys([index]))[0])

    def __contains__(self, index):
        return self.row_of(index) >= 0

    def __iter__(self) -> Iterator[tuple]:
        for row in self.indices:
            yield tuple(int(v) for v in row)

    def cell_point_ids(self, row) -> np.ndarray:
        return self.order[self.starts[row] : self.starts[row + 1]]

    def cell(self, row_or_index) -> VoxelCell:
        row = row_or_index if np.isscalar(row_or_index) else self.row_of(row_or_index)
        if row < 0:
            raise KeyError(row_or_index)
        has_eig = bool(np.isfinite(self.eigenvalues[row, 0]))
        return VoxelCell(
            self.points[self.cell_point_ids(row)],
            self.centroids[row].copy(),
            self.covariances[row].copy(),
            self.eigenvalues[row].copy() if has_eig else None,
            self.normals[row].copy() if has_eig else None,
            bool(self.is_plane[row]),
        )

    def __getitem__(self, index) -> VoxelCell:
        return self.cell(tuple(index))

    @property
    def plane_rows(self):
        return np.flatnonzero(self.is_plane)

    def neighbor_rows(self, rows, connectivity=26) -> np.ndarray:
        """(len(rows), K) array of neighbour rows, -1 where unoccupied."""
        offs = neighbor_offsets(connectivity)
        q = self.keys[np.asarray(rows, dtype=np.int64)][:, None] + offs[None, :]
        return self.find(q)


def voxelize(cloud, leaf, lambda_th=DEFAULT_LAMBDA_TH, min_pts=DEFAULT_MIN_PTS) -> VoxelMap:
    return VoxelMap(cloud, leaf, lambda_th=lambda_th, min_pts=min_pts)
