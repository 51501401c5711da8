"""Hash-vote loop retrieval, triangle pose recovery and plane-overlap checks.

Loop poses follow one convention throughout: ``T_ij`` maps points from the
ego frame of query keyframe ``i`` into the ego frame of match ``j``, so with
world poses ``x`` it equals ``x_j^-1 x_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy.spatial import cKDTree

from .dynastd import DescriptorHashTable, GlobalDescriptor
from .geometry import DegenerateCorrespondences, Pose, exp_map, relative, svd_align
from .voxel_map import VoxelMap


class Ambiguous(ValueError):
    pass


class NoPlanes(ValueError):
    pass


@dataclass
class LoopConfig:
    top_k: int = 5
    vote_min: int = 3
    overlap_min: float = 0.3
    dist_th: float = 0.5
    normal_th: float = 0.8
    min_gap: int = 20
    r_th: float = 10.0
    ambiguity_tol: float = 0.05  # metres between sorted sides
    consensus_th: float = 0.3  # vertex distance accepted as agreeing with a hypothesis
    prune_factor: float = 3.0
    prune_floor: float = 0.05
    max_hypotheses: int = 8
    refine_iters: int = 5  # point-to-plane steps on the verified pose; 0 disables


@dataclass
class LoopCandidate:
    query_frame: int
    match_frame: int
    votes: int
    matched_pairs: np.ndarray  # (votes, 2) rows of (query tri, match tri)
    T_ij: Optional[Pose] = None
    overlap_ratio: Optional[float] = None


@dataclass
class LoopPair:
    i: int
    j: int
    T_ij: Pose
    kind: str = "intra"
    votes: int = 0
    overlap: float = 0.0
    session_i: int = 0
    session_j: int = 0


@dataclass
class PlaneSet:
    """Plane voxel centroids and normals, optionally moved into an ego frame."""

    centroids: np.ndarray
    normals: np.ndarray
    leaf: float = 2.0

    @classmethod
    def from_map(cls, vmap: VoxelMap, pose: Optional[Pose] = None):
        rows = vmap.plane_rows
        c = vmap.centroids[rows]
        n = vmap.normals[rows]
        if pose is not None:
            inv = pose.inverse()
            c = inv.apply(c)
            n = inv.rotate(n)
        return cls(np.ascontiguousarray(c), np.ascontiguousarray(n), vmap.leaf)

    def __len__(self):
        return len(self.centroids)


# -- retrieval -----------------------------------------------------------------


def query_candidates(d: GlobalDescriptor, table: DescriptorHashTable, top_k=5, allowed: Optional[Callable] = None):
    """Rank stored frames by the number of key collisions with ``d``."""
    keys, frames, tris = table.arrays()
    if len(d) == 0 or keys.size == 0:
        return []
    qk = d.keys(table.side_res, table.dot_res, table.offset)
    lo = np.searchsorted(keys, qk, side="left")
    hi = np.searchsorted(keys, qk, side="right")
    cnt = hi - lo
    if cnt.sum() == 0:
        return []
    q_idx = np.repeat(np.arange(len(qk)), cnt)
    t_idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi) if b > a])
    f = frames[t_idx]
    if allowed is not None:
        ok = np.array([bool(allowed(int(x))) for x in np.unique(f)])
        good = np.unique(f)[ok]
        keep = np.isin(f, good)
        q_idx, t_idx, f = q_idx[keep], t_idx[keep], f[keep]
    if f.size == 0:
        return []
    uf, votes = np.unique(f, return_counts=True)
    order = np.lexsort((uf, -votes))[:top_k]
    out = []
    for o in order:
        m = f == uf[o]
        pairs = np.stack([q_idx[m], tris[t_idx[m]]], axis=1)
        out.append(LoopCandidate(d.frame_id, int(uf[o]), int(votes[o]), pairs))
    return out


# -- pose --------------------------------------------------------------------


def is_ambiguous(sides, tol=0.05):
    s = np.asarray(sides, dtype=float).reshape(-1, 3)
    return (s[:, 1] - s[:, 0] < tol) | (s[:, 2] - s[:, 1] < tol)


def _batch_align(src, dst):
    """Rigid transforms for a batch of (K, n, 3) correspondences; returns (R, t)."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    A = np.einsum("kni,knj->kij", src - cs, dst - cd)
    U, S, Vt = np.linalg.svd(A)
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    D = np.zeros((len(src), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ Ut
    t = cd[:, 0] - np.einsum("kij,kj->ki", R, cs[:, 0])
    return R, t


def _fit_pruned(src, dst, cfg):
    T = svd_align(src, dst)
    res = np.linalg.norm(T.apply(src) - dst, axis=1)
    keep = res <= max(cfg.prune_factor * float(np.median(res)), cfg.prune_floor)
    if not keep.all() and keep.sum() >= 3:
        try:
            T = svd_align(src[keep], dst[keep])
        except DegenerateCorrespondences:
            pass
    return T


def loop_pose_hypotheses(src_vertices, dst_vertices, src_sides=None, config: Optional[LoopConfig] = None, max_hyp=1):
    """Candidate poses mapping matched source triangles onto destination triangles.

    Vertices are (K, 3, 3) arrays already paired side-wise (vertex opposite
    l_k with vertex opposite l_k). Near-isosceles triangles are dropped. Each
    remaining triangle proposes a pose; the vertex pairs agreeing with a
    proposal are aligned jointly, followed by one pruning round that drops
    pairs with residual above ``prune_factor`` times the median. Proposals are
    returned best-supported first, at most ``max_hyp`` of them.
    """
    cfg = config or LoopConfig()
    S = np.asarray(src_vertices, dtype=float).reshape(-1, 3, 3)
    D = np.asarray(dst_vertices, dtype=float).reshape(-1, 3, 3)
    if src_sides is not None:
        amb = is_ambiguous(src_sides, cfg.ambiguity_tol)
        if amb.all():
            raise Ambiguous("every matched triangle has near-equal sides")
        S, D = S[~amb], D[~amb]
    if len(S) == 0:
        raise DegenerateCorrespondences("no correspondences")
    # shared keypoints appear in several triangles; count each vertex pair once
    pairs = np.unique(np.concatenate([S.reshape(-1, 3), D.reshape(-1, 3)], axis=1), axis=0)
    src, dst = pairs[:, :3], pairs[:, 3:]
    if len(S) == 1:
        return [_fit_pruned(src, dst, cfg)]
    R, t = _batch_align(S, D)
    moved = np.einsum("kij,nj->kni", R, src) + t[:, None, :]
    support = np.linalg.norm(moved - dst[None], axis=2) < cfg.consensus_th
    score = support.sum(axis=1)
    out, seen = [], []
    for k in np.lexsort((np.arange(len(score)), -score)):
        if len(out) >= max_hyp:
            break
        sel = support[k]
        if sel.sum() < 3:
            sel = np.ones(len(src), dtype=bool)
        sig = sel.tobytes()
        if sig in seen:
            continue
        seen.append(sig)
        try:
            out.append(_fit_pruned(src[sel], dst[sel], cfg))
        except DegenerateCorrespondences:
            continue
    if not out:
        raise DegenerateCorrespondences("no non-degenerate vertex subset")
    return out


def estimate_loop_pose(src_vertices, dst_vertices, src_sides=None, config: Optional[LoopConfig] = None):
    """Best-supported pose from matched triangles; see loop_pose_hypotheses."""
    return loop_pose_hypotheses(src_vertices, dst_vertices, src_sides, config, 1)[0]


# -- verification --------------------------------------------------------------


def verify_plane_overlap(query: PlaneSet, cand: PlaneSet, T: Pose, dist_th=0.5, normal_th=0.8, radius=None):
    """Fraction of query planes that land on a compatible candidate plane under T."""
    if isinstance(query, VoxelMap):
        query = PlaneSet.from_map(query)
    if isinstance(cand, VoxelMap):
        cand = PlaneSet.from_map(cand)
    if len(query) == 0:
        raise NoPlanes("query has no plane voxels")
    if len(cand) == 0:
        return 0.0
    radius = cand.leaf if radius is None else radius
    c = T.apply(query.centroids)
    n = T.rotate(query.normals)
    tree = cKDTree(cand.centroids)
    hits = tree.query_ball_point(c, radius)
    ok = 0
    for k, lst in enumerate(hits):
        if not lst:
            continue
        lst = np.asarray(lst)
        cn = cand.normals[lst]
        along = np.abs(np.einsum("ij,ij->i", cn, c[k] - cand.centroids[lst]))
        dots = np.abs(cn @ n[k])
        if np.any((along < dist_th) & (dots > normal_th)):
            ok += 1
    return ok / len(query)


def _plane_matches(query: PlaneSet, cand: PlaneSet, T: Pose, dist_th, normal_th, radius):
    """Closest compatible candidate plane per query plane under T, or -1."""
    c = T.apply(query.centroids)
    n = T.rotate(query.normals)
    k = min(8, len(cand))
    dd, nb = cKDTree(cand.centroids).query(c, k, distance_upper_bound=radius)
    nb = nb.reshape(len(c), k)
    dd = dd.reshape(len(c), k)
    valid = np.isfinite(dd)
    nbc = np.where(valid, nb, 0)
    cn = cand.normals[nbc]
    along = np.abs(np.einsum("qkj,qkj->qk", cn, c[:, None, :] - cand.centroids[nbc]))
    dots = np.abs(np.einsum("qkj,qj->qk", cn, n))
    ok = valid & (along < dist_th) & (dots > normal_th)
    along = np.where(ok, along, np.inf)
    best = np.argmin(along, axis=1)
    out = nbc[np.arange(len(c)), best]
    out[~ok.any(axis=1)] = -1
    return out


def refine_plane_pose(query: PlaneSet, cand: PlaneSet, T: Pose, iters=5, dist_th=0.5, normal_th=0.8, radius=None) -> Pose:
    """Point-to-plane Gauss-Newton from query plane centroids onto matched candidate planes.

    Directions the planes leave unconstrained are damped and stay where the
    initial pose put them.
    """
    radius = cand.leaf if radius is None else radius
    if len(query) == 0 or len(cand) == 0:
        return T
    for _ in range(iters):
        m = _plane_matches(query, cand, T, dist_th, normal_th, radius)
        sel = m >= 0
        if sel.sum() < 6:
            break
        q = query.centroids[sel]
        cn = cand.normals[m[sel]]
        r = np.einsum("ij,ij->i", cn, T.apply(q) - cand.centroids[m[sel]])
        a = cn @ T.rotation  # rows are R^T n
        J = np.concatenate([np.cross(q, a), a], axis=1)
        H = J.T @ J
        g = J.T @ r
        mu = 1e-6 * np.trace(H) + 1e-12
        delta = -np.linalg.solve(H + mu * np.eye(6), g)
        T = T @ exp_map(delta)
        if np.linalg.norm(delta) < 1e-9:
            break
    return T


def detect(
    d: GlobalDescriptor,
    table: DescriptorHashTable,
    planes: Dict[int, PlaneSet],
    config: Optional[LoopConfig] = None,
    allowed: Optional[Callable] = None,
    kind="intra",
) -> Optional[LoopPair]:
    """Best verified loop for descriptor ``d`` (ego frame), or None."""
    cfg = config or LoopConfig()
    if kind == "intra" and allowed is None:
        qi = d.frame_id

        def allowed(f):
            return abs(f - qi) > cfg.min_gap

    best = None
    for cand in query_candidates(d, table, cfg.top_k, allowed):
        if cand.votes < cfg.vote_min:
            continue
        md = table.descriptors[cand.match_frame]
        qa, ma = cand.matched_pairs[:, 0], cand.matched_pairs[:, 1]
        try:
            hyps = loop_pose_hypotheses(d.vertices[qa], md.vertices[ma], d.sides[qa], cfg, cfg.max_hypotheses)
            # the verification score also picks between pose hypotheses
            ratios = [
                verify_plane_overlap(planes[d.frame_id], planes[cand.match_frame], T, cfg.dist_th, cfg.normal_th)
                for T in hyps
            ]
        except (Ambiguous, DegenerateCorrespondences, NoPlanes):
            continue
        h = int(np.argmax(ratios))
        T, ratio = hyps[h], ratios[h]
        cand.T_ij = T
        cand.overlap_ratio = ratio
        if ratio < cfg.overlap_min:
            continue
        if cfg.refine_iters > 0:
            qp, cp = planes[d.frame_id], planes[cand.match_frame]
            Tr = refine_plane_pose(qp, cp, T, cfg.refine_iters, cfg.dist_th, cfg.normal_th)
            rr = verify_plane_overlap(qp, cp, Tr, cfg.dist_th, cfg.normal_th)
            if rr >= ratio:
                cand.T_ij, cand.overlap_ratio = Tr, rr
        if best is None or (ratio, cand.votes) > (best.overlap_ratio, best.votes):
            best = cand
    if best is None:
        return None
    return LoopPair(d.frame_id, best.match_frame, best.T_ij, kind, best.votes, float(best.overlap_ratio))


def radius_search(target_poses, source_poses, r_th=10.0, kind="radius", session_t=0, session_s=1):
    """Cross-session pairs within ``r_th`` (translation only), seeded with x_t^-1 x_s."""
    if not target_poses or not source_poses:
        return []
    pt = np.array([p.translation for p in target_poses])
    ps = np.array([p.translation for p in source_poses])
    D = cKDTree(pt).sparse_distance_matrix(cKDTree(ps), r_th, output_type="ndarray")
    out = []
    if len(D):
        D = D[D["v"] < r_th]
        order = np.lexsort((D["j"], D["i"]))
        for i, j in zip(D["i"][order], D["j"][order]):
            T = relative(target_poses[i], source_poses[j])
            # pair (source j -> target i): maps source ego into target ego
            out.append(LoopPair(int(j), int(i), T, kind, 0, 0.0, session_s, session_t))
    return out


def loop_report_line(p: LoopPair) -> str:
    q = p.T_ij.quat
    t = p.T_ij.translation
    vals = [*t, q[1], q[2], q[3], q[0]]
    return f"{p.kind} {p.i} {p.j} " + " ".join(f"{v:.9f}" for v in vals) + f" {p.votes} {p.overlap:.6f}"


def parse_loop_report_line(line: str) -> LoopPair:
    parts = line.split()
    if len(parts) != 12:
        raise ValueError(f"expected 12 fields, got {len(parts)}")
    kind, i, j = parts[0], int(parts[1]), int(parts[2])
    tx, ty, tz, qx, qy, qz, qw = map(float, parts[3:10])
    return LoopPair(i, j, Pose((qw, qx, qy, qz), (tx, ty, tz)), kind, int(parts[10]), float(parts[11]))
