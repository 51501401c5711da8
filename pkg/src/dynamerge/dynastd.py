"""Triangle descriptors built from the static structure of a keyframe.

Keypoints come from non-plane voxels that touch a plane voxel: the point
farthest from that plane is kept, carrying the plane normal. Nearby keypoints
are combined into triangles whose sorted side lengths and vertex-normal dot
products form a 6-tuple hash key.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Pose
from .voxel_map import VoxelMap

SIDE_BITS = 12
DOT_BITS = 8
BIN_OFFSET = 0.0


@dataclass
class DescriptorConfig:
    leaf: float = 2.0
    lambda_th: float = 0.01
    min_pts: int = 5
    r_nms: float = 1.0
    kp_min_pts: int = 5
    k_nn: int = 10
    d_min: float = 2.0
    d_max: float = 30.0
    side_res: float = 0.2
    dot_res: float = 0.1
    dominance: float = 0.1
    kp_band: float = 0.15
    face_radius: float = 0.0


@dataclass
class Keypoint:
    position: np.ndarray
    normal: np.ndarray
    score: float = 0.0


@dataclass
class TriangleDescriptor:
    sides: np.ndarray  # ascending
    normal_products: np.ndarray  # a_k pairs the two vertices bounding side l_k
    vertices: np.ndarray  # (3, 3); vertex k is opposite side l_k
    vertex_normals: np.ndarray
    frame_id: int = 0


class GlobalDescriptor:
    """All triangles of one keyframe, stored column-wise."""

    def __init__(self, frame_id, sides=None, dots=None, vertices=None, normals=None):
        self.frame_id = int(frame_id)
        self.sides = np.zeros((0, 3)) if sides is None else np.asarray(sides, dtype=float).reshape(-1, 3)
        self.dots = np.zeros((0, 3)) if dots is None else np.asarray(dots, dtype=float).reshape(-1, 3)
        self.vertices = np.zeros((0, 3, 3)) if vertices is None else np.asarray(vertices, dtype=float).reshape(-1, 3, 3)
        self.normals = np.zeros((0, 3, 3)) if normals is None else np.asarray(normals, dtype=float).reshape(-1, 3, 3)

    def __len__(self):
        return len(self.sides)

    def __getitem__(self, i) -> TriangleDescriptor:
        return TriangleDescriptor(self.sides[i], self.dots[i], self.vertices[i], self.normals[i], self.frame_id)

    @property
    def triangles(self) -> List[TriangleDescriptor]:
        return [self[i] for i in range(len(self))]

    def keys(self, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET):
        return hash_keys(self.sides, self.dots, side_res, dot_res, offset)


# -- keypoints ---------------------------------------------------------------


def dominated_rows(vmap: VoxelMap, full_map: VoxelMap, dynamic, is_ground=None, threshold=0.5):
    """Rows of ``vmap`` whose cell holds mostly dynamic points in ``full_map``.

    ``dynamic``/``is_ground`` are per-point flags of ``full_map``'s cloud; the
    ratio is taken over non-ground points.
    """
    pc = full_map.point_cell
    ng = np.ones(len(pc), dtype=bool) if is_ground is None else ~np.asarray(is_ground, bool)
    n_dyn = np.bincount(pc, weights=(np.asarray(dynamic, bool) & ng).astype(float), minlength=len(full_map))
    n_ng = np.bincount(pc, weights=ng.astype(float), minlength=len(full_map))
    row = full_map.find(vmap.keys)
    ok = row >= 0
    out = np.zeros(len(vmap), dtype=bool)
    r = row[ok]
    out[ok] = n_dyn[r] > threshold * np.maximum(n_ng[r], 1e-300)
    out[ok] &= n_ng[r] > 0
    return out


def _grow_face(tree, points, seed_idx, n, c, level, band, radius, link):
    """Points connected to ``seed_idx`` whose plane distance stays within ``band`` of ``level``."""
    near = np.asarray(tree.query_ball_point(points[seed_idx], radius), dtype=np.int64)
    dist = np.abs((points[near] - c) @ n)
    cand = near[dist >= level - band]
    if cand.size <= 1:
        return points[seed_idx][None]
    sub = points[cand]
    pairs = cKDTree(sub).query_pairs(link, output_type="ndarray")
    g = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(cand), len(cand)))
    _, comp = connected_components(g, directed=False)
    seed_local = int(np.flatnonzero(cand == seed_idx)[0])
    return sub[comp == comp[seed_local]]


def boundary_candidates(vmap: VoxelMap, dominated=None, min_pts=1, band=0.0, face_radius=0.0, face_link=0.4):
    """For every boundary voxel: its farthest point from an adjacent plane.

    With ``band > 0`` the position is the centroid of all points within
    ``band`` of that maximum distance, which is far less sensitive to which
    rings happened to hit a flat protruding face. With ``face_radius > 0``
    that band is grown across voxel borders (points linked within
    ``face_link``, at most ``face_radius`` from the farthest point), so the
    position no longer depends on where the grid cuts the face. Returns
    (positions, normals, scores) before suppression.
    """
    nb = vmap.neighbor_rows(np.arange(len(vmap)), 6)
    is_plane = vmap.is_plane
    safe = np.maximum(nb, 0)
    adj = (nb >= 0) & is_plane[safe]
    rows = np.flatnonzero(~is_plane & adj.any(axis=1) & (vmap.counts >= min_pts))
    if dominated is not None:
        rows = rows[~np.asarray(dominated, bool)[rows]]
    tree = cKDTree(vmap.points) if face_radius > 0 and rows.size else None
    pos, nrm, score = [], [], []
    for r in rows:
        ids = vmap.cell_point_ids(r)
        P = vmap.points[ids]
        best = (-1.0, None, None)
        for p_row in nb[r][adj[r]]:
            n = vmap.normals[p_row]
            dist = np.abs((P - vmap.centroids[p_row]) @ n)
            k = int(np.argmax(dist))
            if dist[k] > best[0]:
                if tree is not None:
                    face = _grow_face(tree, vmap.points, ids[k], n, vmap.centroids[p_row], dist[k], band, face_radius, face_link)
                    p = face.mean(axis=0)
                elif band > 0:
                    p = P[dist >= dist[k] - band].mean(axis=0)
                else:
                    p = P[k]
                best = (float(dist[k]), p, n)
        pos.append(best[1])
        nrm.append(best[2])
        score.append(best[0])
    if not rows.size:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return np.array(pos), np.array(nrm), np.array(score)


def non_max_suppression(pos, score, radius):
    """Greedy suppression; higher score wins, ties go to the lexicographically smaller point."""
    if len(pos) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], -score))
    tree = cKDTree(pos)
    alive = np.ones(len(pos), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(pos[i], radius):
            alive[j] = False
    return np.array(sorted(keep), dtype=np.int64)


def extract_keypoints(vmap: VoxelMap, dominated=None, r_nms=1.0, min_pts=1, band=0.0, face_radius=0.0) -> List[Keypoint]:
    pos, nrm, score = boundary_candidates(vmap, dominated, min_pts, band, face_radius)
    keep = non_max_suppression(pos, score, r_nms)
    return [Keypoint(pos[i].copy(), nrm[i].copy(), float(score[i])) for i in keep]


# -- triangles ---------------------------------------------------------------


def canonical_triangles(V, N):
    """Reorder (M,3,3) vertex triples so sides ascend and vertex k is opposite l_k.

    Returns (sides, dots, V, N) in canonical order.
    """
    V = np.asarray(V, dtype=float).reshape(-1, 3, 3)
    N = np.asarray(N, dtype=float).reshape(-1, 3, 3)
    # side opposite vertex k joins the other two
    opp = np.stack(
        [
            np.linalg.norm(V[:, 1] - V[:, 2], axis=1),
            np.linalg.norm(V[:, 2] - V[:, 0], axis=1),
            np.linalg.norm(V[:, 0] - V[:, 1], axis=1),
        ],
        axis=1,
    )
    order = np.lexsort((N[:, :, 2], opp), axis=1) if len(V) else np.zeros((0, 3), dtype=np.int64)
    idx = np.arange(len(V))[:, None]
    V = V[idx, order]
    N = N[idx, order]
    sides = opp[idx, order]
    dots = np.stack(
        [
            np.einsum("ij,ij->i", N[:, 1], N[:, 2]),
            np.einsum("ij,ij->i", N[:, 2], N[:, 0]),
            np.einsum("ij,ij->i", N[:, 0], N[:, 1]),
        ],
        axis=1,
    )
    return sides, dots, V, N


def build_triangles(keypoints, k_nn=10, d_min=2.0, d_max=30.0, frame_id=0) -> GlobalDescriptor:
    if isinstance(keypoints, tuple):
        P, Nn = (np.asarray(a, dtype=float).reshape(-1, 3) for a in keypoints)
    else:
        P = np.array([k.position for k in keypoints], dtype=float).reshape(-1, 3)
        Nn = np.array([k.normal for k in keypoints], dtype=float).reshape(-1, 3)
    n = len(P)
    if n < 3:
        return GlobalDescriptor(frame_id)
    k = min(k_nn, n - 1)
    _, nbr = cKDTree(P).query(P, k + 1)
    nbr = nbr[:, 1:]
    a, b = np.triu_indices(k, 1)
    tri = np.stack([np.repeat(np.arange(n), len(a)), nbr[:, a].ravel(), nbr[:, b].ravel()], axis=1)
    tri = np.unique(np.sort(tri, axis=1), axis=0)
    tri = tri[(tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2])]
    sides, dots, V, N = canonical_triangles(P[tri], Nn[tri])
    ok = np.all((sides >= d_min) & (sides <= d_max), axis=1)
    return GlobalDescriptor(frame_id, sides[ok], dots[ok], V[ok], N[ok])


def quantize(sides, dots, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET):
    """(side bins, dot bins) as int64 arrays.

    ``offset`` shifts the bin edges: 0 gives plain floor bins, 0.5 centres
    each bin on a multiple of the resolution. Dots are clipped to [-1, 1] and
    the top bin is closed.
    """
    sb = np.floor(np.asarray(sides, dtype=float) / side_res + offset).astype(np.int64)
    top = int(np.floor(2.0 / dot_res + offset - 1e-9))
    a = np.clip(np.asarray(dots, dtype=float), -1.0, 1.0)
    db = np.clip(np.floor((a + 1.0) / dot_res + offset).astype(np.int64), 0, top)
    return sb, db


def hash_keys(sides, dots, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET) -> np.ndarray:
    """Packed int64 keys of the quantized 6-tuple."""
    sb, db = quantize(np.reshape(sides, (-1, 3)), np.reshape(dots, (-1, 3)), side_res, dot_res, offset)
    if sb.size and (sb.min() < 0 or sb.max() >= 1 << SIDE_BITS) or 2.0 / dot_res + 1 > 1 << DOT_BITS:
        raise OverflowError("descriptor bins exceed key width")
    key = np.zeros(len(sb), dtype=np.int64)
    for c in range(3):
        key = (key << SIDE_BITS) | sb[:, c]
    for c in range(3):
        key = (key << DOT_BITS) | db[:, c]
    return key


def hash_key(tri: TriangleDescriptor, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET) -> tuple:
    sb, db = quantize(tri.sides, tri.normal_products, side_res, dot_res, offset)
    return tuple(int(v) for v in np.concatenate([sb, db]))


def unpack_hash_key(key: int) -> tuple:
    key = int(key)
    dots = [(key >> (DOT_BITS * i)) & ((1 << DOT_BITS) - 1) for i in (2, 1, 0)]
    key >>= 3 * DOT_BITS
    sides = [(key >> (SIDE_BITS * i)) & ((1 << SIDE_BITS) - 1) for i in (2, 1, 0)]
    return tuple(sides + dots)


class DescriptorHashTable:
    """Packed key -> [(frame_id, triangle index)], with a sorted array view for voting."""

    def __init__(self, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET):
        self.side_res = side_res
        self.dot_res = dot_res
        self.offset = offset
        self.descriptors = {}
        self._buckets = defaultdict(list)
        self._arrays = None

    def insert(self, d: GlobalDescriptor):
        if len(d) == 0:
            self.descriptors.setdefault(d.frame_id, d)
            return
        self.descriptors[d.frame_id] = d
        for i, k in enumerate(d.keys(self.side_res, self.dot_res, self.offset)):
            self._buckets[int(k)].append((d.frame_id, i))
        self._arrays = None

    def lookup(self, key):
        """Triangles stored under ``key`` (packed int or 6-tuple) as (triangle, frame_id)."""
        if isinstance(key, tuple):
            k = 0
            for v in key[:3]:
                k = (k << SIDE_BITS) | int(v)
            for v in key[3:]:
                k = (k << DOT_BITS) | int(v)
            key = k
        return [(self.descriptors[f][i], f) for f, i in self._buckets.get(int(key), [])]

    def __len__(self):
        return sum(len(v) for v in self._buckets.values())

    def arrays(self):
        """(keys, frame_ids, tri_idx) sorted by key then frame then index."""
        if self._arrays is None:
            rows = [(k, f, i) for k, lst in self._buckets.items() for f, i in lst]
            if rows:
                arr = np.array(rows, dtype=np.int64)
                o = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
                arr = arr[o]
                self._arrays = (arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())
            else:
                e = np.zeros(0, dtype=np.int64)
                self._arrays = (e, e, e)
        return self._arrays


def insert(table: DescriptorHashTable, d: GlobalDescriptor):
    table.insert(d)


def to_ego_frame(d: GlobalDescriptor, pose: Pose) -> GlobalDescriptor:
    inv = pose.inverse()
    V = inv.apply(d.vertices.reshape(-1, 3)).reshape(-1, 3, 3)
    N = inv.rotate(d.normals.reshape(-1, 3)).reshape(-1, 3, 3)
    return GlobalDescriptor(d.frame_id, d.sides.copy(), d.dots.copy(), V, N)


def transform_descriptor(d: GlobalDescriptor, T: Pose) -> GlobalDescriptor:
    """Move vertices and normals by T and recompute the attributes from them."""
    V = T.apply(d.vertices.reshape(-1, 3)).reshape(-1, 3, 3)
    N = T.rotate(d.normals.reshape(-1, 3)).reshape(-1, 3, 3)
    sides, dots, V, N = canonical_triangles(V, N)
    return GlobalDescriptor(d.frame_id, sides, dots, V, N)


@dataclass
class DescribedFrame:
    descriptor: GlobalDescriptor
    vmap: VoxelMap
    keypoints: List[Keypoint]


def describe(points, config: Optional[DescriptorConfig] = None, frame_id=0, dominated_fn=None) -> DescribedFrame:
    """Voxelize ``points``, extract keypoints and build the frame descriptor.

    ``dominated_fn(vmap)`` may return a per-row mask of voxels to skip.
    """
    cfg = config or DescriptorConfig()
    vmap = VoxelMap(points, cfg.leaf, cfg.lambda_th, cfg.min_pts)
    dom = dominated_fn(vmap) if dominated_fn is not None else None
    kps = extract_keypoints(vmap, dom, cfg.r_nms, cfg.kp_min_pts, cfg.kp_band, cfg.face_radius)
    d = build_triangles(kps, cfg.k_nn, cfg.d_min, cfg.d_max, frame_id)
    return DescribedFrame(d, vmap, kps)


def describe_segmented(seg, config: Optional[DescriptorConfig] = None, frame_id=0, frame: Optional[Pose] = None) -> DescribedFrame:
    """Describe the static part of a removal result, skipping voxels it flagged as mostly dynamic.

    With ``frame`` (the keyframe pose) the cloud is first moved into that ego
    frame, so the voxel grid and the descriptor follow the sensor rather than
    the session's map frame.
    """
    cfg = config or DescriptorConfig()
    pts = seg.points
    full = seg.coarse_map
    if frame is not None:
        pts = frame.inverse().apply(pts)
        full = None
    if full is None or abs(full.leaf - cfg.leaf) > 1e-12:
        full = VoxelMap(pts, cfg.leaf, cfg.lambda_th, cfg.min_pts)

    def dom(vm):
        return dominated_rows(vm, full, seg.dynamic, seg.is_ground, cfg.dominance)

    return describe(pts[~seg.dynamic], cfg, frame_id, dom)


def multiset_keys(d: GlobalDescriptor, side_res=0.2, dot_res=0.1, offset=BIN_OFFSET):
    return np.sort(d.keys(side_res, dot_res, offset))
