"""Removal scores, place-recognition precision/recall, ATE and map-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import Pose
from .voxel_map import pack_keys, voxel_indices


class EmptyClass(ValueError):
    pass


class NoAssociations(ValueError):
    pass


class NoInliers(ValueError):
    pass


# -- removal -------------------------------------------------------------------


@dataclass
class RemovalScore:
    SA: float
    DA: float
    AA: float
    n_true_static: int
    n_total_static: int
    n_true_dynamic: int
    n_total_dynamic: int

    def as_dict(self):
        return {
            "SA": self.SA,
            "DA": self.DA,
            "AA": self.AA,
            "n_true_static": self.n_true_static,
            "n_total_static": self.n_total_static,
            "n_true_dynamic": self.n_true_dynamic,
            "n_total_dynamic": self.n_total_dynamic,
        }


def removal_score(pred, gt, standard_leaf: Optional[float] = None, points=None) -> RemovalScore:
    """SA / DA / AA of per-point dynamic flags ``pred`` against truth ``gt``.

    With ``standard_leaf`` and ``points`` every (voxel, true class) group
    counts once: a static group is preserved if any of its points is kept, a
    dynamic group is detected only if none of its points is kept. This is
    what comparing two maps downsampled to the same leaf amounts to.
    """
    pred = np.asarray(pred, dtype=bool).reshape(-1)
    gt = np.asarray(gt, dtype=bool).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"{pred.size} predictions for {gt.size} labels")
    if standard_leaf is not None and points is not None:
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(P) != len(gt):
            raise ValueError("points and labels differ in length")
        key = pack_keys(voxel_indices(P, standard_leaf))
        group = np.stack([key, gt.astype(np.int64)], axis=1)
        _, inv = np.unique(group, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        n = int(inv.max()) + 1 if inv.size else 0
        kept = np.bincount(inv, weights=(~pred).astype(float), minlength=n) > 0
        cls = np.zeros(n, dtype=bool)
        cls[inv] = gt
        gt_u, kept_u = cls, kept
    else:
        gt_u, kept_u = gt, ~pred
    n_s = int(np.count_nonzero(~gt_u))
    n_d = int(np.count_nonzero(gt_u))
    if n_s == 0:
        raise EmptyClass("no static points in ground truth")
    if n_d == 0:
        raise EmptyClass("no dynamic points in ground truth")
    ts = int(np.count_nonzero(~gt_u & kept_u))
    td = int(np.count_nonzero(gt_u & ~kept_u))
    sa, da = ts / n_s, td / n_d
    return RemovalScore(sa, da, float(np.sqrt(sa * da)), ts, n_s, td, n_d)


# -- place recognition ---------------------------------------------------------


@dataclass
class ScoredMatch:
    query: int
    match: int
    score: float


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def f1_score(precision, recall):
    s = precision + recall
    return 0.0 if s <= 0 else 2.0 * precision * recall / s


def _positions(p):
    if isinstance(p, dict):
        return {int(k): np.asarray(v.translation if isinstance(v, Pose) else v, dtype=float) for k, v in p.items()}
    return {i: np.asarray(v.translation if isinstance(v, Pose) else v, dtype=float) for i, v in enumerate(p)}


def ground_truth_positives(query_positions, d_th, db_positions=None, min_gap=0) -> List[int]:
    """Query ids with at least one database frame within ``d_th``.

    Without ``db_positions`` the queries are their own database and only
    frames more than ``min_gap`` earlier count, as in intra-session search.
    """
    q = _positions(query_positions)
    intra = db_positions is None
    db = q if intra else _positions(db_positions)
    if not db:
        return []
    ids = np.array(sorted(db))
    pts = np.array([db[i] for i in ids])
    tree = cKDTree(pts)
    out = []
    for i in sorted(q):
        hits = ids[tree.query_ball_point(q[i], d_th)]
        if intra:
            hits = hits[hits < i - min_gap]
        if hits.size:
            out.append(i)
    return out


def pr_curve(
    matches: Iterable,
    query_positions,
    d_th=35.0,
    db_positions=None,
    min_gap=0,
    thresholds: Optional[Sequence[float]] = None,
) -> List[PRPoint]:
    """Precision/recall as the score threshold sweeps over the matches.

    ``matches`` holds one (query, match, score) per query that returned a
    candidate. A returned match is a true positive when the matched frame
    lies within ``d_th`` of the query. Precision is 1 when nothing is
    returned.
    """
    ms = [m if isinstance(m, ScoredMatch) else ScoredMatch(int(m[0]), int(m[1]), float(m[2])) for m in matches]
    q = _positions(query_positions)
    db = q if db_positions is None else _positions(db_positions)
    n_gt = len(ground_truth_positives(query_positions, d_th, db_positions, min_gap))
    scores = np.array([m.score for m in ms], dtype=float)
    correct = np.array([np.linalg.norm(q[m.query] - db[m.match]) <= d_th for m in ms], dtype=bool)
    if thresholds is None:
        thresholds = np.unique(scores)
    out = []
    for t in thresholds:
        ret = scores >= t
        tp = int(np.count_nonzero(ret & correct))
        fp = int(np.count_nonzero(ret & ~correct))
        fn = n_gt - tp
        pr = tp / (tp + fp) if tp + fp else 1.0
        re = tp / n_gt if n_gt else 0.0
        out.append(PRPoint(float(t), tp, fp, fn, pr, re, f1_score(pr, re)))
    return out


def max_f1(curve: Sequence[PRPoint]) -> PRPoint:
    return max(curve, key=lambda p: (p.f1, p.recall, -p.threshold))


def recall_at_precision(curve: Sequence[PRPoint], precision=1.0) -> float:
    ok = [p.recall for p in curve if p.precision >= precision]
    return max(ok) if ok else 0.0


# -- trajectory --------------------------------------------------------------


@dataclass
class ATEStats:
    max: float
    mean: float
    median: float
    min: float
    rmse: float
    std: float
    n: int

    def as_dict(self):
        return {k: getattr(self, k) for k in ("max", "mean", "median", "min", "rmse", "std", "n")}


def associate(est_times, gt_times, tol=0.05):
    """(est index, gt index) pairs by nearest timestamp within ``tol``."""
    et = np.asarray(est_times, dtype=float)
    gt = np.asarray(gt_times, dtype=float)
    if et.size == 0 or gt.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(gt, kind="stable")
    gs = gt[order]
    pos = np.searchsorted(gs, et)
    lo = np.clip(pos - 1, 0, len(gs) - 1)
    hi = np.clip(pos, 0, len(gs) - 1)
    pick = np.where(np.abs(gs[hi] - et) < np.abs(gs[lo] - et), hi, lo)
    ok = np.abs(gs[pick] - et) <= tol
    return np.flatnonzero(ok), order[pick[ok]]


def _xyz(poses):
    return np.array([p.translation if isinstance(p, Pose) else np.asarray(p, dtype=float)[:3] for p in poses]).reshape(-1, 3)


def translation_errors(estimated, ground_truth, est_times=None, gt_times=None, tol=0.05) -> np.ndarray:
    E = _xyz(estimated)
    G = _xyz(ground_truth)
    if est_times is None and gt_times is None:
        if len(E) != len(G):
            raise NoAssociations(f"{len(E)} estimated vs {len(G)} ground-truth poses and no timestamps")
        ei = gi = np.arange(len(E))
    else:
        ei, gi = associate(est_times, gt_times, tol)
    if len(ei) == 0:
        raise NoAssociations("no pose pairs within the timestamp tolerance")
    return np.linalg.norm(E[ei] - G[gi], axis=1)


def error_stats(e) -> ATEStats:
    e = np.asarray(e, dtype=float).reshape(-1)
    if e.size == 0:
        raise NoAssociations("no errors to summarize")
    return ATEStats(
        float(e.max()),
        float(e.mean()),
        float(np.median(e)),
        float(e.min()),
        float(np.sqrt(np.mean(e * e))),
        float(e.std()),
        len(e),
    )


def ate(estimated, ground_truth, est_times=None, gt_times=None, tol=0.05) -> ATEStats:
    """Absolute trajectory error without any alignment step."""
    return error_stats(translation_errors(estimated, ground_truth, est_times, gt_times, tol))


# -- map quality ---------------------------------------------------------------


@dataclass
class MapQuality:
    ac: float
    cd: float
    mme: float
    tau: float
    n_inliers: int = 0

    def as_dict(self):
        return {"ac": self.ac, "cd": self.cd, "mme": self.mme, "tau": self.tau, "n_inliers": self.n_inliers}


def gaussian_entropy(cov) -> np.ndarray:
    """Differential entropy 0.5 ln((2 pi e)^d det C) of each (d, d) covariance."""
    C = np.asarray(cov, dtype=float)
    d = C.shape[-1]
    sign, logdet = np.linalg.slogdet(C)
    h = 0.5 * (d * np.log(2 * np.pi * np.e) + logdet)
    return np.where(sign > 0, h, np.nan)


def mean_map_entropy(points, radius, k_min=10, tree=None, chunk=2048) -> float:
    """Average entropy of neighbour covariances over points with >= ``k_min`` neighbours.

    Neighbourhoods include the point itself; points with singular covariances
    are left out.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        return float("nan")
    tree = tree or cKDTree(P)
    # centring keeps E[xx^T] - mu mu^T from cancelling far from the origin
    Pc = P - P.mean(axis=0)
    # per-point second moments let each neighbourhood sum be one sparse product
    outer = (Pc[:, :, None] * Pc[:, None, :]).reshape(-1, 9)
    vals = []
    for s in range(0, len(P), chunk):
        nb = tree.query_ball_point(P[s : s + chunk], radius)
        cnt = np.array([len(x) for x in nb])
        rows = np.repeat(np.arange(len(nb)), cnt)
        cols = np.concatenate([np.asarray(x, dtype=np.int64) for x in nb]) if cnt.sum() else np.zeros(0, np.int64)
        A = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(nb), len(P)))
        n = cnt[:, None].astype(float)
        mu = (A @ Pc) / n
        S = ((A @ outer) / n).reshape(-1, 3, 3) - mu[:, :, None] * mu[:, None, :]
        ok = cnt - 1 >= k_min
        if ok.any():
            vals.append(gaussian_entropy(S[ok]))
    if not vals:
        return float("nan")
    v = np.concatenate(vals)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


def map_quality(P1, P2, tau=5.0, k_mme=10, mme_radius: Optional[float] = None) -> MapQuality:
    """AC, CD and MME between two clouds expressed in one frame.

    Inliers are nearest-neighbour pairs closer than ``tau`` in either
    direction. AC pools both directions; CD adds the two directional means of
    squared distances; MME is taken over the union of both clouds with
    neighbourhoods of ``mme_radius`` (``tau`` by default).
    """
    A = np.asarray(P1, dtype=float).reshape(-1, 3)
    B = np.asarray(P2, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise NoInliers("empty cloud")
    dab, _ = cKDTree(B).query(A)
    dba, _ = cKDTree(A).query(B)
    ia = dab < tau
    ib = dba < tau
    if not ia.any() or not ib.any():
        raise NoInliers(f"no nearest-neighbour pairs within {tau} m")
    sq = np.concatenate([dab[ia] ** 2, dba[ib] ** 2])
    ac = float(np.sqrt(sq.mean()))
    cd = float(np.mean(dab[ia] ** 2) + np.mean(dba[ib] ** 2))
    mme = mean_map_entropy(np.concatenate([A, B]), tau if mme_radius is None else mme_radius, k_mme)
    return MapQuality(ac, cd, mme, float(tau), int(ia.sum() + ib.sum()))
