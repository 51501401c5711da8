"""Generalized ICP, voxel-partitioned unified maps and two-phase session merging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dynastd import DescriptorHashTable, GlobalDescriptor
from .geometry import Pose, exp_map
from .loop_closure import LoopConfig, LoopPair, PlaneSet, detect, radius_search
from .pose_graph import MapSession, MultiResult, PGOConfig, optimize_multi
from .voxel_map import VoxelMap, offset_key, pack_keys, voxel_indices


class NoCorrespondences(ValueError):
    pass


def voxel_downsample(points, leaf) -> np.ndarray:
    """Centroid of the points in each occupied voxel, in sorted key order."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0 or leaf <= 0:
        return pts.copy()
    keys = pack_keys(voxel_indices(pts, leaf))
    uk, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.empty((len(uk), 3))
    for k in range(3):
        out[:, k] = np.bincount(inv, weights=pts[:, k], minlength=len(uk)) / cnt
    return out


# -- G-ICP -------------------------------------------------------------------


@dataclass
class GICPConfig:
    k: int = 20
    epsilon: float = 1e-3
    max_corr: float = 1.0
    max_iters: int = 50
    trans_tol: float = 1e-4
    rot_tol: float = 1e-6
    min_pairs: int = 10


@dataclass
class RegistrationResult:
    T: Pose
    fitness: float
    rmse: float
    iterations: int
    converged: bool = True
    cost_history: List[float] = field(default_factory=list)


def point_covariances(points, k=20, epsilon=1e-3, tree=None) -> np.ndarray:
    """k-NN covariances reshaped to eigenvalues (epsilon, 1, 1) along their own axes."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(P)
    if n == 0:
        return np.zeros((0, 3, 3))
    kk = min(k, n)
    tree = tree or cKDTree(P)
    _, idx = tree.query(P, kk)
    idx = np.asarray(idx).reshape(n, kk)
    nb = P[idx]
    d = nb - nb.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", d, d) / kk
    _, V = np.linalg.eigh(C)
    D = np.array([epsilon, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", V, D, V)


def gicp_refine(source, target, T_init: Pose = None, config: Optional[GICPConfig] = None, target_tree=None, cov_s=None, cov_t=None):
    """Distribution-to-distribution ICP from ``source`` onto ``target``.

    Correspondences are re-found every iteration; within an iteration a
    Gauss-Newton step on the Mahalanobis cost is halved until the cost on that
    iteration's pairs does not increase.
    """
    cfg = config or GICPConfig()
    S = np.asarray(source, dtype=float).reshape(-1, 3)
    Tg = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(S) == 0 or len(Tg) == 0:
        raise NoCorrespondences("empty cloud")
    T = T_init or Pose()
    tree = target_tree or cKDTree(Tg)
    Cs = point_covariances(S, cfg.k, cfg.epsilon) if cov_s is None else cov_s
    Ct = point_covariances(Tg, cfg.k, cfg.epsilon, tree) if cov_t is None else cov_t
    history = []
    converged = False
    it = 0

    def pairs_for(T):
        p = T.apply(S)
        dist, j = tree.query(p, distance_upper_bound=cfg.max_corr)
        ok = np.isfinite(dist)
        return np.flatnonzero(ok), j[ok]

    def cost_of(T, si, tj, M):
        d = Tg[tj] - T.apply(S[si])
        return float(np.einsum("ni,nij,nj->", d, M, d))

    while it < cfg.max_iters:
        it += 1
        si, tj = pairs_for(T)
        if len(si) < cfg.min_pairs:
            raise NoCorrespondences(f"only {len(si)} pairs within {cfg.max_corr} m")
        R = T.rotation
        M = np.linalg.inv(Ct[tj] + R @ Cs[si] @ R.T)
        p = T.apply(S[si])
        d = Tg[tj] - p
        # left perturbation: d(exp(e) p)/de = [-[p]x, I], so dd/de = [[p]x, -I]
        J = np.zeros((len(si), 3, 6))
        J[:, :, :3] = skew_batch(p)
        J[:, :, 3:] = -np.eye(3)
        JtM = np.einsum("nki,nkj->nij", J, M)
        H = np.einsum("nij,njk->ik", JtM, J)
        b = np.einsum("nij,nj->i", JtM, d)
        try:
            delta = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError as exc:
            raise NoCorrespondences("degenerate correspondence geometry") from exc
        c0 = float(np.einsum("ni,nij,nj->", d, M, d))
        history.append(c0)
        step = delta
        accepted = False
        for _ in range(10):
            Tn = exp_map(step) @ T
            if cost_of(Tn, si, tj, M) <= c0:
                accepted = True
                break
            step = step / 2
        if not accepted:
            converged = True
            break
        T = Tn
        if np.linalg.norm(step[3:]) < cfg.trans_tol and np.linalg.norm(step[:3]) < cfg.rot_tol * 100:
            converged = True
            break
    si, tj = pairs_for(T)
    if len(si) < cfg.min_pairs:
        raise NoCorrespondences(f"only {len(si)} pairs within {cfg.max_corr} m")
    r = np.linalg.norm(Tg[tj] - T.apply(S[si]), axis=1)
    return RegistrationResult(T, len(si) / len(S), float(np.sqrt(np.mean(r * r))), it, converged, history)


def skew_batch(p):
    out = np.zeros((len(p), 3, 3))
    out[:, 0, 1] = -p[:, 2]
    out[:, 0, 2] = p[:, 1]
    out[:, 1, 0] = p[:, 2]
    out[:, 1, 2] = -p[:, 0]
    out[:, 2, 0] = -p[:, 1]
    out[:, 2, 1] = p[:, 0]
    return out


# -- unified map -------------------------------------------------------------


class UnifiedMap:
    """Merged cloud partitioned into voxels, each searched through its own kd-tree.

    Nearest-neighbour queries start with the 27 voxels around the query and
    grow the cube one ring at a time until the best distance is provably
    final. Equal distances go to the lowest point index.
    """

    def __init__(self, points, leaf=0.5, session_ids=None, dynamic=None, reference=0):
        P = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        self.points = P
        self.leaf = float(leaf)
        self.reference = reference
        n = len(P)
        self.session_ids = np.zeros(n, np.uint8) if session_ids is None else np.asarray(session_ids, np.uint8)
        self.dynamic = np.zeros(n, np.uint8) if dynamic is None else np.asarray(dynamic, np.uint8)
        keys = pack_keys(voxel_indices(P, self.leaf))
        self.order = np.argsort(keys, kind="stable")
        sk = keys[self.order]
        self.keys, self.starts = np.unique(sk, return_index=True)
        self.starts = np.append(self.starts, n)
        self._trees: Dict[int, cKDTree] = {}

    def __len__(self):
        return len(self.points)

    @property
    def n_voxels(self):
        return len(self.keys)

    def voxel_point_ids(self, row):
        return self.order[self.starts[row] : self.starts[row + 1]]

    def tree(self, row) -> cKDTree:
        t = self._trees.get(row)
        if t is None:
            t = cKDTree(self.points[self.voxel_point_ids(row)])
            self._trees[row] = t
        return t

    def build_all(self):
        for r in range(self.n_voxels):
            self.tree(r)
        return self

    def _shell_offsets(self, r):
        rng = range(-r, r + 1)
        return np.array(
            [offset_key(a, b, c) for a in rng for b in rng for c in rng if max(abs(a), abs(b), abs(c)) == r],
            dtype=np.int64,
        )

    def nearest(self, queries, max_dist=np.inf):
        """(distances, indices); inf / -1 where nothing lies within ``max_dist``."""
        Q = np.asarray(queries, dtype=float).reshape(-1, 3)
        nq = len(Q)
        best = np.full(nq, np.inf)
        idx = np.full(nq, -1, dtype=np.int64)
        if nq == 0 or len(self.points) == 0:
            return best, idx
        qkeys = pack_keys(voxel_indices(Q, self.leaf))
        # cube of radius r is complete once best <= r * leaf
        r_max = int(np.ceil(max_dist / self.leaf)) + 1 if np.isfinite(max_dist) else None
        span = 2 * np.linalg.norm(np.ptp(self.points, axis=0)) + 2 * self.leaf
        active = np.arange(nq)
        r = 0
        rec_q, rec_d, rec_i, rec_tie = [], [], [], []
        while active.size:
            offs = np.array([0], dtype=np.int64) if r == 0 else self._shell_offsets(r)
            rows = _lookup(self.keys, qkeys[active][:, None] + offs[None, :])
            qa, oa = np.nonzero(rows >= 0)
            vr = rows[qa, oa]
            order = np.lexsort((qa, vr))
            qa, vr = active[qa[order]], vr[order]
            if len(vr):
                cut = np.flatnonzero(np.diff(vr)) + 1
                for grp_q, grp_v in zip(np.split(qa, cut), np.split(vr, cut)):
                    row = int(grp_v[0])
                    ids = self.voxel_point_ids(row)
                    k = min(2, len(ids))
                    d, j = self.tree(row).query(Q[grp_q], k)
                    d = d.reshape(len(grp_q), k)
                    j = j.reshape(len(grp_q), k)
                    tie = d[:, 1] <= d[:, 0] * (1 + 1e-9) + 1e-15 if k == 2 else np.zeros(len(grp_q), bool)
                    rec_q.append(grp_q)
                    rec_d.append(d[:, 0])
                    rec_i.append(ids[j[:, 0]])
                    rec_tie.append(tie)
                    np.minimum.at(best, grp_q, d[:, 0])
            done = best[active] <= r * self.leaf
            if r_max is not None and r >= r_max:
                done[:] = True
            if r_max is None and r > 0 and r * self.leaf > span:
                done[:] = True
            active = active[~done]
            r += 1
        if not rec_q:
            return np.full(nq, np.inf), idx
        cq = np.concatenate(rec_q)
        cd = np.concatenate(rec_d)
        ci = np.concatenate(rec_i)
        ct = np.concatenate(rec_tie)
        near = cd <= best[cq] * (1 + 1e-9) + 1e-15
        cq, cd, ci, ct = cq[near], cd[near], ci[near], ct[near]
        n_near = np.bincount(cq, minlength=nq)
        any_tie = np.bincount(cq, weights=ct.astype(float), minlength=nq) > 0
        # a single nearest voxel without an in-tree tie: take its answer
        easy = (n_near == 1) & ~any_tie
        sel = easy[cq]
        idx[cq[sel]] = ci[sel]
        hard = np.flatnonzero((n_near > 0) & ~easy)
        if hard.size:
            order = np.argsort(cq, kind="stable")
            cq_s, ci_s = cq[order], ci[order]
            starts = np.searchsorted(cq_s, hard)
            ends = np.searchsorted(cq_s, hard, side="right")
            inv_row = np.empty(len(self.points), dtype=np.int64)
            inv_row[self.order] = np.repeat(np.arange(self.n_voxels), np.diff(self.starts))
            for q, a, b in zip(hard, starts, ends):
                # exact tie-break over every point of the nearest voxels
                rows = np.unique(inv_row[ci_s[a:b]])
                ids = np.concatenate([self.voxel_point_ids(v) for v in rows])
                dd = np.sqrt(np.sum((self.points[ids] - Q[q]) ** 2, axis=1))
                idx[q] = ids[np.lexsort((ids, dd))[0]]
        found = idx >= 0
        best = np.full(nq, np.inf)
        best[found] = np.sqrt(np.sum((self.points[idx[found]] - Q[found]) ** 2, axis=1))
        far = best > max_dist
        best[far] = np.inf
        idx[far] = -1
        return best, idx


def _lookup(sorted_keys, q):
    pos = np.searchsorted(sorted_keys, q)
    pos_c = np.minimum(pos, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos_c] == q, pos_c, -1)


def brute_force_nearest(points, queries):
    """Reference NN with the same distance formula and lowest-index tie-break."""
    P = np.asarray(points, dtype=float)
    out_d, out_i = [], []
    for q in np.asarray(queries, dtype=float).reshape(-1, 3):
        d = np.sqrt(np.sum((P - q) ** 2, axis=1))
        k = int(np.lexsort((np.arange(len(P)), d))[0])
        out_d.append(d[k])
        out_i.append(k)
    return np.array(out_d), np.array(out_i, dtype=np.int64)


def build_unified(clouds: Sequence, leaf=0.5, session_ids=None, dynamic=None, reference=0) -> UnifiedMap:
    clouds = [np.asarray(c, dtype=float).reshape(-1, 3) for c in clouds]
    P = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    if session_ids is None:
        session_ids = np.concatenate([np.full(len(c), i) for i, c in enumerate(clouds)]) if clouds else None
    elif np.ndim(session_ids) == 1 and len(session_ids) == len(clouds) and len(clouds) != len(P):
        session_ids = np.concatenate([np.full(len(c), s) for c, s in zip(clouds, session_ids)])
    if dynamic is not None and not np.isscalar(dynamic) and len(dynamic) == len(clouds) and len(clouds) != len(P):
        dynamic = np.concatenate([np.asarray(d).reshape(-1) for d in dynamic])
    return UnifiedMap(P, leaf, session_ids, dynamic, reference)


def map_diff(prior: UnifiedMap, current: UnifiedMap, tau_d=0.5):
    """(added, removed): points of each map with no counterpart within ``tau_d`` in the other."""
    d_cur, _ = prior.nearest(current.points, tau_d)
    d_pri, _ = current.nearest(prior.points, tau_d)
    return current.points[~(d_cur <= tau_d)], prior.points[~(d_pri <= tau_d)]


# -- two-phase merge -----------------------------------------------------------


@dataclass
class MergeConfig:
    loop: LoopConfig = field(default_factory=LoopConfig)
    pgo: PGOConfig = field(default_factory=PGOConfig)
    gicp: GICPConfig = field(default_factory=GICPConfig)
    r_th: float = 10.0
    radius_per_frame: int = 1  # nearest partners kept per source keyframe
    gicp_leaf: float = 0.2  # downsampling before G-ICP
    min_fitness: float = 0.3
    keep_phase1: bool = False  # phase-2 factors replace the descriptor ones by default
    unified_leaf: float = 0.5
    plane_leaf: float = 2.0
    threads: int = 1


@dataclass
class MergeResult:
    unified: Optional[UnifiedMap]
    phase1: Optional[MultiResult]
    phase2: Optional[MultiResult]
    inter_loops: List[LoopPair]
    radius_loops: List[LoopPair]
    unaligned: List[int]

    @property
    def poses(self):
        final = self.phase2 or self.phase1
        return final.poses if final else {}


def _planes(session: MapSession, cfg: MergeConfig):
    out = {}
    for k, cloud in enumerate(session.scans):
        vm = VoxelMap(cloud, cfg.plane_leaf)
        out[k] = PlaneSet.from_map(vm)
    return out


def detect_inter(central: MapSession, query: MapSession, cfg: MergeConfig, central_planes=None, query_planes=None):
    """Descriptor loops from every query keyframe into the central session (both ego frame)."""
    table = central.table
    if table is None:
        table = DescriptorHashTable()
        for d in central.descriptors:
            table.insert(d)
    cp = central_planes or _planes(central, cfg)
    qp = query_planes or _planes(query, cfg)
    loops = []
    offset = 1 + max(table.descriptors) if table.descriptors else 0
    for k, d in enumerate(query.descriptors):
        # keep query ids from colliding with stored ones
        dq = GlobalDescriptor(offset + k, d.sides, d.dots, d.vertices, d.normals)
        planes = dict(cp)
        planes[dq.frame_id] = qp[k]
        lp = detect(dq, table, planes, cfg.loop, allowed=lambda f: True, kind="inter")
        if lp is not None:
            loops.append(LoopPair(k, lp.j, lp.T_ij, "inter", lp.votes, lp.overlap, query.id, central.id))
    return loops


def _refine_pair(args):
    src, tgt, T0, gcfg = args
    try:
        return gicp_refine(src, tgt, T0, gcfg)
    except NoCorrespondences:
        return None


def merge_sessions(central: MapSession, queries: Sequence[MapSession], config: Optional[MergeConfig] = None) -> MergeResult:
    """Descriptor-initialized alignment followed by G-ICP refinement of radius pairs."""
    cfg = config or MergeConfig()
    sessions = {central.id: central, **{q.id: q for q in queries}}
    planes = {sid: _planes(s, cfg) for sid, s in sessions.items()}
    inter = []
    for q in queries:
        inter += detect_inter(central, q, cfg, planes[central.id], planes[q.id])
    phase1 = optimize_multi(central, list(queries), inter, cfg.pgo, strict=False)
    aligned = [central.id] + [q.id for q in queries if q.id not in phase1.unaligned]

    # phase 2: radius pairs between every aligned session pair
    jobs, meta = [], []
    down = {sid: [voxel_downsample(c, cfg.gicp_leaf) for c in sessions[sid].scans] for sid in aligned}
    for a_i, ta in enumerate(aligned):
        for sb in aligned[a_i + 1 :]:
            pairs = radius_search(phase1.poses[ta], phase1.poses[sb], cfg.r_th, "radius", ta, sb)
            pairs = _nearest_per_source(pairs, phase1.poses[ta], phase1.poses[sb], cfg.radius_per_frame)
            for lp in pairs:
                jobs.append((down[sb][lp.i], down[ta][lp.j], lp.T_ij, cfg.gicp))
                meta.append(lp)
    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(_refine_pair, jobs))
    else:
        results = [_refine_pair(j) for j in jobs]
    radius_loops = []
    for lp, res in zip(meta, results):
        if res is None or res.fitness < cfg.min_fitness:
            continue
        radius_loops.append(LoopPair(lp.i, lp.j, res.T, "radius", 0, res.fitness, lp.session_i, lp.session_j))
    factors = radius_loops + (inter if cfg.keep_phase1 else [])
    phase2 = None
    if radius_loops:
        active_q = [sessions[s] for s in aligned[1:]]
        phase2 = optimize_multi(central, active_q, factors, cfg.pgo, initial_anchors=phase1.anchors, strict=False)
    final = phase2 or phase1
    clouds, sids = [], []
    for sid in aligned:
        for p, c in zip(final.poses[sid], sessions[sid].scans):
            clouds.append(p.apply(c))
            sids.append(sid)
    unified = build_unified(clouds, cfg.unified_leaf, sids, reference=central.id) if clouds else None
    return MergeResult(unified, phase1, phase2, inter, radius_loops, list(phase1.unaligned))


def _nearest_per_source(pairs, target_poses, source_poses, k):
    if k is None or k <= 0:
        return pairs
    by_src: Dict[int, list] = {}
    for lp in pairs:
        d = np.linalg.norm(target_poses[lp.j].translation - source_poses[lp.i].translation)
        by_src.setdefault(lp.i, []).append((d, lp.j, lp))
    out = []
    for i in sorted(by_src):
        out += [x[2] for x in sorted(by_src[i], key=lambda x: (x[0], x[1]))[:k]]
    return out
