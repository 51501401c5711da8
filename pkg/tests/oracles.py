"""Slow, loop-based reference implementations used to check the vectorized metrics."""

import math

import numpy as np


def removal_counts(pred, gt):
    ts = ns = td = nd = 0
    for p, g in zip(pred, gt):
        if g:
            nd += 1
            td += bool(p)
        else:
            ns += 1
            ts += not p
    sa, da = ts / ns, td / nd
    return sa, da, math.sqrt(sa * da)


def pr_points(matches, q_pos, db_pos, d_th, thresholds, intra_gap=None):
    n_gt = 0
    for i, qp in q_pos.items():
        for j, dp in db_pos.items():
            if intra_gap is not None and not j < i - intra_gap:
                continue
            if math.dist(qp, dp) <= d_th:
                n_gt += 1
                break
    out = []
    for t in thresholds:
        tp = fp = 0
        for q, m, s in matches:
            if s < t:
                continue
            if math.dist(q_pos[q], db_pos[m]) <= d_th:
                tp += 1
            else:
                fp += 1
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / n_gt if n_gt else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append((p, r, f))
    return out


def ate_stats(est, gt):
    e = [math.dist(a, b) for a, b in zip(est, gt)]
    n = len(e)
    mean = sum(e) / n
    s = sorted(e)
    med = s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])
    rmse = math.sqrt(sum(v * v for v in e) / n)
    std = math.sqrt(sum((v - mean) ** 2 for v in e) / n)
    return dict(max=max(e), mean=mean, median=med, min=min(e), rmse=rmse, std=std)


def nn_dist(src, dst):
    """Distance from each src point to its nearest dst point via a full distance matrix."""
    out = np.empty(len(src))
    for s in range(0, len(src), 500):
        D = np.sqrt(((src[s : s + 500, None, :] - dst[None, :, :]) ** 2).sum(-1))
        out[s : s + 500] = D.min(axis=1)
    return out


def map_quality(A, B, tau):
    dab = nn_dist(A, B)
    dba = nn_dist(B, A)
    ia = [d * d for d in dab if d < tau]
    ib = [d * d for d in dba if d < tau]
    ac = math.sqrt((sum(ia) + sum(ib)) / (len(ia) + len(ib)))
    cd = sum(ia) / len(ia) + sum(ib) / len(ib)
    return ac, cd


def mean_map_entropy(P, radius, k_min):
    vals = []
    for p in P:
        nb = P[np.sqrt(((P - p) ** 2).sum(1)) <= radius]
        if len(nb) - 1 < k_min:
            continue
        c = nb - nb.mean(axis=0)
        C = c.T @ c / len(nb)
        det = np.linalg.det(C)
        if det <= 0:
            continue
        vals.append(0.5 * math.log((2 * math.pi * math.e) ** 3 * det))
    return sum(vals) / len(vals)


def numeric_jacobians(factor, values, h=1e-6):
    """Central differences of ``factor.residual`` under right perturbations of each key."""
    from dynamerge.geometry import exp_map

    out = []
    for key in factor.keys:
        J = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = dict(values)
            minus = dict(values)
            plus[key] = values[key] @ exp_map(d)
            minus[key] = values[key] @ exp_map(-d)
            J[:, k] = (factor.residual(plus) - factor.residual(minus)) / (2 * h)
        out.append(J)
    return out


def relative_error(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)
