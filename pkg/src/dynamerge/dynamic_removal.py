"""Online dynamic point segmentation on a two-level voxel grid.

Per keyframe: coarse voxels are classified as plane/non-plane, near-vertical
planes with nothing beneath them become ground, occupied voxels touching the
ground become dynamic candidates. Each fine column over the ground gets a
free interval between the top ground cell and the lowest non-ground cell.
Candidate fine cells of the current keyframe are then scored against the
previous N measurements with a log-odds filter.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose
from .voxel_map import (
    KEY_BITS,
    KEY_OFFSET,
    VoxelCell,
    VoxelMap,
    pack_keys,
    sorted_lookup,
    unpack_keys,
    voxel_indices,
)

_ZMASK = (1 << KEY_BITS) - 1


class LengthMismatch(ValueError):
    pass


class NoGroundNeighbor(ValueError):
    pass


@dataclass
class RemovalConfig:
    coarse_leaf: float = 2.0
    fine_leaf: float = 0.2
    theta_a: float = 30.0  # degrees
    m_th: float = 0.1
    window: int = 5
    ceiling: int = 10
    p_free: float = 0.7
    p_occ: float = 0.3
    lambda_th: float = 0.01
    min_pts: int = 5

    def __post_init__(self):
        ratio = self.coarse_leaf / self.fine_leaf
        if self.fine_leaf <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("fine leaf must divide the coarse leaf")
        if not (0.0 < self.p_free < 1.0 and 0.0 < self.p_occ < 1.0):
            raise ValueError("measurement probabilities must lie in (0, 1)")
        if self.window < 1 or self.ceiling < 0:
            raise ValueError("window must be >= 1 and ceiling >= 0")


def log_odds(p):
    # a difference of logs keeps log_odds(p) + log_odds(1 - p) at rounding level
    return math.log(p) - math.log(1.0 - p)


def sigmoid(l):
    return 1.0 / (1.0 + np.exp(-np.asarray(l, dtype=float)))


def accumulate_keyframe(scans: Sequence, poses: Sequence[Pose], n_a: Optional[int] = None) -> np.ndarray:
    """Transform each scan by its pose and stack them into one world-frame cloud."""
    if len(scans) != len(poses) or (n_a is not None and len(scans) != n_a):
        raise LengthMismatch(f"{len(scans)} scans, {len(poses)} poses, expected {n_a}")
    if not scans:
        return np.zeros((0, 3))
    return np.concatenate([p.apply(np.asarray(s, dtype=float)[:, :3]) for s, p in zip(scans, poses)])


@dataclass
class GroundModel:
    vmap: VoxelMap
    ground_rows: np.ndarray
    cand_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # inferred plane for every candidate row (aligned with cand_rows)
    n_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    p_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def ground_indices(self):
        return {tuple(int(v) for v in i) for i in self.vmap.indices[self.ground_rows]}

    @property
    def candidate_indices(self):
        return {tuple(int(v) for v in i) for i in self.vmap.indices[self.cand_rows]}

    def row_mask(self):
        m = np.zeros(len(self.vmap), dtype=bool)
        m[self.ground_rows] = True
        return m


def select_ground(vmap: VoxelMap, theta_a=30.0) -> GroundModel:
    """Plane voxels within theta_a of +z and lowest in their column."""
    cos_th = math.cos(math.radians(theta_a))
    n = vmap.normals
    with np.errstate(invalid="ignore"):
        upright = vmap.is_plane & (np.nan_to_num(n[:, 2]) / np.maximum(np.linalg.norm(np.nan_to_num(n), axis=1), 1e-300) > cos_th)
    col = vmap.keys >> KEY_BITS
    # keys are sorted, so within one column rows run bottom-up
    lowest = np.ones(len(vmap), dtype=bool)
    lowest[1:] = col[1:] != col[:-1]
    return GroundModel(vmap, np.flatnonzero(upright & lowest))


def select_candidates(vmap: VoxelMap, ground: GroundModel) -> np.ndarray:
    """Occupied rows in the 26-neighbourhood of the ground, ground excluded."""
    if ground.ground_rows.size == 0:
        return np.zeros(0, dtype=np.int64)
    nb = vmap.neighbor_rows(ground.ground_rows, 26).ravel()
    nb = np.unique(nb[nb >= 0])
    return nb[~ground.row_mask()[nb]]


def infer_candidate_planes(vmap: VoxelMap, ground: GroundModel, cand_rows):
    """Average normal and centroid of the ground voxels around each candidate.

    Returns (n_a, p_a, has_ground); rows without ground neighbours carry NaN.
    """
    cand_rows = np.asarray(cand_rows, dtype=np.int64)
    if cand_rows.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=bool)
    nb = vmap.neighbor_rows(cand_rows, 26)
    gm = ground.row_mask()
    is_g = (nb >= 0) & gm[np.maximum(nb, 0)]
    w = is_g[..., None].astype(float)
    safe = np.maximum(nb, 0)
    n_sum = (np.nan_to_num(vmap.normals[safe]) * w).sum(axis=1)
    p_sum = (vmap.centroids[safe] * w).sum(axis=1)
    cnt = is_g.sum(axis=1)
    has = cnt > 0
    n_a = np.full((cand_rows.size, 3), np.nan)
    p_a = np.full((cand_rows.size, 3), np.nan)
    n_a[has] = n_sum[has] / np.linalg.norm(n_sum[has], axis=1, keepdims=True)
    p_a[has] = p_sum[has] / cnt[has, None]
    return n_a, p_a, has


def segment_ground_points(cell, n_a, p_a, m_th=0.1):
    """Split a candidate cell's points into (ground, nonground) by height over the plane."""
    pts = cell.points if isinstance(cell, VoxelCell) else np.asarray(cell, dtype=float).reshape(-1, 3)
    if n_a is None or p_a is None or not np.all(np.isfinite(n_a)):
        raise NoGroundNeighbor("candidate has no adjacent ground voxel")
    n_a = np.asarray(n_a, dtype=float)
    n_a = n_a / np.linalg.norm(n_a)
    g = (pts - np.asarray(p_a, dtype=float)) @ n_a < m_th
    return pts[g], pts[~g]


@dataclass
class FrameMeasurement:
    """Occupied fine cells plus per-column free intervals (z_ground, z_min)."""

    frame_id: int
    occupied: np.ndarray  # sorted packed fine keys
    columns: np.ndarray  # sorted packed (ix, iy) column ids
    z_ground: np.ndarray
    z_min: np.ndarray

    def is_occupied(self, keys):
        return sorted_lookup(self.occupied, keys) >= 0

    def is_free(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        row = sorted_lookup(self.columns, keys >> KEY_BITS)
        iz = (keys & _ZMASK) - KEY_OFFSET
        ok = row >= 0
        r = np.maximum(row, 0)
        free = ok & (iz > self.z_ground[r]) & (iz < self.z_min[r]) if self.columns.size else np.zeros(keys.shape, bool)
        return free & ~self.is_occupied(keys)

    def free_keys(self) -> np.ndarray:
        """Enumerate every free fine key (tests and debugging only)."""
        out = []
        for c, zg, zm in zip(self.columns, self.z_ground, self.z_min):
            z = np.arange(zg + 1, zm, dtype=np.int64)
            out.append((np.int64(c) << KEY_BITS) | (z + KEY_OFFSET))
        keys = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        return keys[~self.is_occupied(keys)]

    @property
    def occupied_indices(self):
        return {tuple(int(v) for v in i) for i in unpack_keys(self.occupied)}

    @property
    def free_indices(self):
        return {tuple(int(v) for v in i) for i in unpack_keys(self.free_keys())}


def estimate_free_space(points, is_ground, fine_leaf=0.2, ceiling=10, frame_id=0, fine_keys=None) -> FrameMeasurement:
    """Free intervals for every fine column that holds ground points.

    ``is_ground`` marks points labelled ground (ground voxels plus the ground
    part of candidate voxels); everything else bounds the free space from above.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    is_ground = np.asarray(is_ground, dtype=bool)
    fk = pack_keys(voxel_indices(pts, fine_leaf)) if fine_keys is None else fine_keys
    colk = fk >> KEY_BITS
    iz = (fk & _ZMASK) - KEY_OFFSET
    if not is_ground.any():
        e = np.zeros(0, dtype=np.int64)
        return FrameMeasurement(frame_id, e, e, e, e)
    cols, inv = np.unique(colk[is_ground], return_inverse=True)
    zg = np.full(cols.size, np.iinfo(np.int64).min, dtype=np.int64)
    np.maximum.at(zg, inv, iz[is_ground])
    row = sorted_lookup(cols, colk)
    sel = (row >= 0) & ~is_ground
    sel[sel] = iz[sel] > zg[row[sel]]
    big = np.iinfo(np.int64).max
    zm = np.full(cols.size, big, dtype=np.int64)
    np.minimum.at(zm, row[sel], iz[sel])
    open_col = zm == big
    zm[open_col] = zg[open_col] + ceiling + 1
    occupied = np.unique(fk[row >= 0])
    return FrameMeasurement(frame_id, occupied, cols, zg, zm)


class DynamicStateMap:
    """Fine key -> log-odds. Keys absent from the table read as l = 0."""

    def __init__(self, keys=None, log_odds=None):
        self.keys = np.zeros(0, dtype=np.int64) if keys is None else np.asarray(keys, dtype=np.int64)
        self.log_odds = np.zeros(self.keys.size) if log_odds is None else np.asarray(log_odds, dtype=float)

    def __len__(self):
        return int(self.keys.size)

    def lookup(self, keys):
        row = sorted_lookup(self.keys, keys)
        return np.where(row >= 0, self.log_odds[np.maximum(row, 0)] if self.keys.size else 0.0, 0.0)

    def __getitem__(self, index):
        return float(self.lookup(pack_keys([index]))[0])

    def probability(self, keys=None):
        return sigmoid(self.log_odds if keys is None else self.lookup(keys))

    def dynamic_keys(self):
        return self.keys[self.log_odds > 0.0]

    def merged(self, keys, values) -> "DynamicStateMap":
        """Copy with ``keys`` (sorted, unique) overwritten by ``values``."""
        if self.keys.size == 0:
            return DynamicStateMap(keys.copy(), np.asarray(values, dtype=float).copy())
        keep = ~np.isin(self.keys, keys)
        k = np.concatenate([self.keys[keep], keys])
        v = np.concatenate([self.log_odds[keep], values])
        o = np.argsort(k, kind="stable")
        return DynamicStateMap(k[o], v[o])


def update_dynamic_states(states, window, candidate_keys, l_free=None, l_occ=None) -> DynamicStateMap:
    """Reset every candidate to l = 0 and replay the window of past measurements.

    occupied -> l_occ (static evidence); free -> l_free; otherwise unchanged.
    """
    l_free = log_odds(0.7) if l_free is None else l_free
    l_occ = log_odds(0.3) if l_occ is None else l_occ
    keys = np.unique(np.asarray(candidate_keys, dtype=np.int64))
    l = np.zeros(keys.size)
    for m in window:
        occ = m.is_occupied(keys)
        free = m.is_free(keys)
        l = l + np.where(occ, l_occ, 0.0) + np.where(free, l_free, 0.0)
    states = DynamicStateMap() if states is None else states
    return states.merged(keys, l)


@dataclass
class SegmentationResult:
    points: np.ndarray
    dynamic: np.ndarray  # bool per input point
    is_ground: Optional[np.ndarray] = None
    in_candidate: Optional[np.ndarray] = None
    coarse_map: Optional[VoxelMap] = None
    ground: Optional[GroundModel] = None
    states: Optional[DynamicStateMap] = None
    measurement: Optional[FrameMeasurement] = None
    frame_id: int = 0

    @property
    def static_points(self):
        return self.points[~self.dynamic]

    @property
    def dynamic_points(self):
        return self.points[self.dynamic]


def segment_dynamic(points, states: DynamicStateMap, is_ground, in_candidate, fine_leaf=0.2, fine_keys=None):
    """Non-ground candidate points inside fine cells with p > 0.5 are dynamic."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    fk = pack_keys(voxel_indices(pts, fine_leaf)) if fine_keys is None else fine_keys
    mask = np.asarray(in_candidate, bool) & ~np.asarray(is_ground, bool)
    dyn = np.zeros(len(pts), dtype=bool)
    if mask.any():
        # p > 0.5 is the same test as l > 0
        dyn[mask] = states.lookup(fk[mask]) > 0.0
    return dyn


def label_ground_points(vmap: VoxelMap, ground: GroundModel, m_th=0.1):
    """Per-point (is_ground, in_candidate) for the map's points."""
    pc = vmap.point_cell
    g_rows = ground.row_mask()
    is_ground = g_rows[pc].copy()
    cand_slot = np.full(len(vmap), -1, dtype=np.int64)
    cand_slot[ground.cand_rows] = np.arange(ground.cand_rows.size)
    slot = cand_slot[pc]
    in_cand = slot >= 0
    if in_cand.any():
        s = slot[in_cand]
        n_a = ground.n_a[s]
        ok = np.isfinite(n_a[:, 0])
        h = np.einsum("ij,ij->i", vmap.points[in_cand] - ground.p_a[s], np.nan_to_num(n_a))
        g = ok & (h < m_th)
        is_ground[np.flatnonzero(in_cand)[g]] = True
    return is_ground, in_cand


class DynamicRemover:
    """Sliding-window online remover; feed keyframes in temporal order."""

    def __init__(self, config: Optional[RemovalConfig] = None):
        self.config = config or RemovalConfig()
        self.window: deque = deque(maxlen=self.config.window)
        self.l_free = log_odds(self.config.p_free)
        self.l_occ = log_odds(self.config.p_occ)
        self._count = 0

    def reset(self):
        self.window.clear()
        self._count = 0

    def process(self, keyframe, frame_id=None) -> SegmentationResult:
        cfg = self.config
        fid = self._count if frame_id is None else frame_id
        self._count += 1
        pts = np.ascontiguousarray(keyframe, dtype=float).reshape(-1, 3)
        vmap = VoxelMap(pts, cfg.coarse_leaf, cfg.lambda_th, cfg.min_pts)
        ground = select_ground(vmap, cfg.theta_a)
        ground.cand_rows = select_candidates(vmap, ground)
        ground.n_a, ground.p_a, _ = infer_candidate_planes(vmap, ground, ground.cand_rows)
        is_ground, in_cand = label_ground_points(vmap, ground, cfg.m_th)

        fk = pack_keys(voxel_indices(pts, cfg.fine_leaf))
        cand_pts = in_cand & ~is_ground
        states = update_dynamic_states(None, self.window, fk[cand_pts], self.l_free, self.l_occ)
        dyn = segment_dynamic(pts, states, is_ground, in_cand, cfg.fine_leaf, fine_keys=fk)

        meas = estimate_free_space(pts, is_ground, cfg.fine_leaf, cfg.ceiling, fid, fine_keys=fk)
        self.window.append(meas)
        return SegmentationResult(pts, dyn, is_ground, in_cand, vmap, ground, states, meas, fid)


def remove_dynamics(keyframes, config: Optional[RemovalConfig] = None):
    remover = DynamicRemover(config)
    return [remover.process(kf, i) for i, kf in enumerate(keyframes)]
