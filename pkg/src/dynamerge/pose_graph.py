"""SE(3) pose-graph optimization with robust loop factors and per-session anchors.

Every relative factor compares a measurement ``z`` with ``x_a^-1 x_b`` through
the tangent residual ``log(z^-1 x_a^-1 x_b)``. Variables are perturbed on the
right, ``x <- x exp(d)``, twist order (omega, v).
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Pose, adjoint, exp_map, log_map, relative, se3_right_jacobian_inv


class SingularSystem(np.linalg.LinAlgError):
    pass


class NotConverged(RuntimeWarning):
    pass


class DisconnectedSession(ValueError):
    def __init__(self, sessions):
        self.sessions = list(sessions)
        super().__init__(f"sessions without an inter loop to the central map: {self.sessions}")


def robust_weight(e, xi=1.0):
    """Cauchy cost and IRLS weight for residual norm ``e``."""
    if not xi > 0:
        raise ValueError("scale must be positive")
    u = (np.asarray(e, dtype=float) / xi) ** 2
    cost = xi * xi * np.log1p(u)
    w = 1.0 / (1.0 + u)
    if np.ndim(cost) == 0:
        return float(cost), float(w)
    return cost, w


# -- factors -----------------------------------------------------------------


def _between_jacobians(A: Pose, B: Pose, z: Pose):
    """Residual of log(z^-1 A^-1 B) and its Jacobians wrt right perturbations of A and B."""
    AB = relative(A, B)
    r = log_map(relative(z, AB))
    Jr = se3_right_jacobian_inv(r)
    Jb = Jr
    Ja = -Jr @ adjoint(AB.inverse())
    return r, Ja, Jb


@dataclass
class BetweenFactor:
    a: Hashable
    b: Hashable
    z: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    robust: Optional[float] = None  # Cauchy scale, None for plain least squares
    kind: str = "odometry"

    @property
    def keys(self):
        return (self.a, self.b)

    def linearize(self, values):
        r, Ja, Jb = _between_jacobians(values[self.a], values[self.b], self.z)
        return r, [Ja, Jb]

    def residual(self, values):
        return log_map(relative(self.z, relative(values[self.a], values[self.b])))


@dataclass
class PriorFactor:
    a: Hashable
    z: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    robust: Optional[float] = None
    kind: str = "prior"

    @property
    def keys(self):
        return (self.a,)

    def linearize(self, values):
        r = self.residual(values)
        return r, [se3_right_jacobian_inv(r)]

    def residual(self, values):
        return log_map(relative(self.z, values[self.a]))


@dataclass
class AnchoredBetweenFactor:
    """Between factor on anchor-composed poses: log(z^-1 (da xa)^-1 (db xb))."""

    anchor_a: Hashable
    a: Hashable
    anchor_b: Hashable
    b: Hashable
    z: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    robust: Optional[float] = None
    kind: str = "inter"

    @property
    def keys(self):
        return (self.anchor_a, self.a, self.anchor_b, self.b)

    def linearize(self, values):
        xa, xb = values[self.a], values[self.b]
        A = values[self.anchor_a] @ xa
        B = values[self.anchor_b] @ xb
        r, JA, JB = _between_jacobians(A, B, self.z)
        # d exp(e) x = d x exp(Ad(x^-1) e)
        return r, [JA @ adjoint(xa.inverse()), JA, JB @ adjoint(xb.inverse()), JB]

    def residual(self, values):
        A = values[self.anchor_a] @ values[self.a]
        B = values[self.anchor_b] @ values[self.b]
        return log_map(relative(self.z, relative(A, B)))


def factor_cost(f, r):
    e2 = float(r @ f.information @ r)
    if f.robust is None:
        return e2, 1.0
    return robust_weight(np.sqrt(e2), f.robust)


# -- graph and solver --------------------------------------------------------


@dataclass
class OptimizationResult:
    values: Dict[Hashable, Pose]
    cost_history: List[float]
    iterations: int
    converged: bool
    weights: List[float] = field(default_factory=list)

    @property
    def final_cost(self):
        return self.cost_history[-1]


class FactorGraph:
    def __init__(self):
        self.values: Dict[Hashable, Pose] = {}
        self.factors: list = []
        self.fixed: set = set()

    def add_variable(self, key, pose: Pose, fixed=False):
        self.values[key] = pose
        if fixed:
            self.fixed.add(key)

    def add(self, factor):
        for k in factor.keys:
            if k not in self.values:
                raise KeyError(f"factor references unknown variable {k!r}")
        self.factors.append(factor)
        return factor

    def fix(self, key):
        self.fixed.add(key)

    def total_cost(self, values=None):
        values = self.values if values is None else values
        return float(sum(factor_cost(f, f.residual(values))[0] for f in self.factors))

    def ordering(self):
        free = sorted((k for k in self.values if k not in self.fixed), key=_order_key)
        return {k: i for i, k in enumerate(free)}

    def optimize(self, max_iters=50, tol=1e-8, lambda0=1e-4, warn=True) -> OptimizationResult:
        return levenberg_marquardt(self, max_iters, tol, lambda0, warn)


def _order_key(k):
    return tuple((0, v) if isinstance(v, (int, np.integer)) else (1, str(v)) for v in (k if isinstance(k, tuple) else (k,)))


def _normal_equations(graph: FactorGraph, values, index):
    n = 6 * len(index)
    rows, cols, data = [], [], []
    g = np.zeros(n)
    cost = 0.0
    weights = []
    for f in graph.factors:
        r, Js = f.linearize(values)
        c, w = factor_cost(f, r)
        cost += c
        weights.append(w)
        Om = w * f.information
        blocks = [(index[k], J) for k, J in zip(f.keys, Js) if k in index]
        for ia, Ja in blocks:
            g[6 * ia : 6 * ia + 6] += Ja.T @ Om @ r
            JtO = Ja.T @ Om
            for ib, Jb in blocks:
                rr, cc = np.meshgrid(np.arange(6 * ia, 6 * ia + 6), np.arange(6 * ib, 6 * ib + 6), indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                data.append((JtO @ Jb).ravel())
    if rows:
        H = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
    else:
        H = sp.csc_matrix((n, n))
    return H, g, cost, weights


def _retract(values, index, delta):
    out = dict(values)
    for k, i in index.items():
        out[k] = values[k] @ exp_map(delta[6 * i : 6 * i + 6])
    return out


def levenberg_marquardt(graph: FactorGraph, max_iters=50, tol=1e-8, lambda0=1e-4, warn=True) -> OptimizationResult:
    """LM with diagonal damping over the sparse normal equations.

    Robust factors enter through iteratively reweighted least squares. A step
    is accepted only when the total cost does not increase.
    """
    index = graph.ordering()
    if not index:
        cost = graph.total_cost()
        return OptimizationResult(dict(graph.values), [cost], 0, True)
    if not graph.fixed and not any(isinstance(f, PriorFactor) for f in graph.factors):
        raise SingularSystem("gauge is not fixed: no fixed variable and no prior")
    values = dict(graph.values)
    H, g, cost, weights = _normal_equations(graph, values, index)
    history = [cost]
    lam = lambda0
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        diag = H.diagonal()
        damp = sp.diags(lam * np.maximum(diag, 1e-12))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                delta = spla.spsolve((H + damp).tocsc(), -g)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise SingularSystem(str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise SingularSystem("non-finite update")
        cand = _retract(values, index, delta)
        new_cost = graph.total_cost(cand)
        if new_cost <= cost:
            values = cand
            lam = max(lam / 10.0, 1e-12)
            H, g, cost, weights = _normal_equations(graph, values, index)
            history.append(cost)
            if np.linalg.norm(delta) < tol:
                converged = True
                break
        else:
            lam *= 10.0
            if np.linalg.norm(delta) < tol or lam > 1e16:
                converged = True
                break
    if not converged and warn:
        warnings.warn(f"stopped after {max_iters} iterations without convergence", NotConverged)
    return OptimizationResult(values, history, it, converged, weights)


# -- sessions ----------------------------------------------------------------


@dataclass
class PGOConfig:
    max_iters: int = 50
    tol: float = 1e-8
    xi: float = 1.0
    odom_var_rot: float = 1e-4  # rad^2
    odom_var_trans: float = 1e-3  # m^2
    loop_var_min: float = 0.01  # covariance scale at overlap 1
    loop_var_gain: float = 0.09  # added per unit of missing overlap
    anchor_prior_var: float = 1e6
    robust_inter: bool = False
    lambda0: float = 1e-4


def odometry_information(cfg: PGOConfig):
    return np.diag([1 / cfg.odom_var_rot] * 3 + [1 / cfg.odom_var_trans] * 3)


def loop_information(overlap, cfg: PGOConfig):
    var = cfg.loop_var_min + (1.0 - float(np.clip(overlap, 0.0, 1.0))) * cfg.loop_var_gain
    return np.eye(6) / var


@dataclass
class MapSession:
    id: int
    poses: List[Pose]
    scans: Optional[list] = None  # static keyframe clouds, ego frame
    descriptors: Optional[list] = None
    table: Optional[object] = None
    loops: list = field(default_factory=list)  # intra LoopPairs
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.poses)
        for name in ("scans", "descriptors"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} entries for {n} poses")

    def __len__(self):
        return len(self.poses)


def _add_session(graph: FactorGraph, sid, poses, loops, cfg: PGOConfig, fix_first=True):
    info = odometry_information(cfg)
    for k, p in enumerate(poses):
        graph.add_variable(("x", sid, k), p, fixed=fix_first and k == 0)
    for k in range(len(poses) - 1):
        graph.add(BetweenFactor(("x", sid, k), ("x", sid, k + 1), relative(poses[k], poses[k + 1]), info))
    for lp in loops:
        # T_ij maps ego i into ego j, i.e. measures x_j^-1 x_i
        graph.add(
            BetweenFactor(("x", sid, lp.j), ("x", sid, lp.i), lp.T_ij, loop_information(lp.overlap, cfg), cfg.xi, "loop")
        )


def optimize_intra(poses: Sequence[Pose], loops=(), config: Optional[PGOConfig] = None, return_result=False):
    """Odometry chain plus robust intra loops; the first pose is the gauge."""
    cfg = config or PGOConfig()
    poses = list(poses)
    if not poses:
        return ([], None) if return_result else []
    graph = FactorGraph()
    _add_session(graph, 0, poses, loops, cfg)
    res = graph.optimize(cfg.max_iters, cfg.tol, cfg.lambda0)
    out = [res.values[("x", 0, k)] for k in range(len(poses))]
    return (out, res) if return_result else out


@dataclass
class MultiResult:
    poses: Dict[int, List[Pose]]  # anchor-composed, central coordinates
    anchors: Dict[int, Pose]
    local: Dict[int, List[Pose]]
    unaligned: List[int]
    result: Optional[OptimizationResult] = None


def connected_sessions(central_id, session_ids, inter_loops):
    adj = {s: set() for s in session_ids}
    for lp in inter_loops:
        if lp.session_i in adj and lp.session_j in adj and lp.session_i != lp.session_j:
            adj[lp.session_i].add(lp.session_j)
            adj[lp.session_j].add(lp.session_i)
    seen = {central_id}
    todo = deque([central_id])
    while todo:
        s = todo.popleft()
        for t in sorted(adj[s]):
            if t not in seen:
                seen.add(t)
                todo.append(t)
    return seen


def _initial_anchors(central: MapSession, queries, inter_loops, anchors):
    """Chain anchors outward from the central map through the first usable loop."""
    by_id = {central.id: central, **{q.id: q for q in queries}}
    changed = True
    while changed:
        changed = False
        for lp in inter_loops:
            for s_known, k_known, s_new, k_new, T in (
                (lp.session_j, lp.j, lp.session_i, lp.i, lp.T_ij),
                (lp.session_i, lp.i, lp.session_j, lp.j, lp.T_ij.inverse()),
            ):
                # T maps ego(k_new) into ego(k_known)
                if s_known in anchors and s_new not in anchors and s_new in by_id:
                    world_new = anchors[s_known] @ by_id[s_known].poses[k_known] @ T
                    anchors[s_new] = world_new @ by_id[s_new].poses[k_new].inverse()
                    changed = True
    return anchors


def optimize_multi(
    central: MapSession,
    queries: Sequence[MapSession],
    inter_loops,
    config: Optional[PGOConfig] = None,
    initial_anchors: Optional[Dict[int, Pose]] = None,
    strict=True,
) -> MultiResult:
    """Joint optimization of all session graphs tied together by anchor nodes.

    The central anchor is fixed at identity and every session keeps its first
    pose fixed in its own frame; query anchors carry a weak prior around their
    initial value. Sessions not reachable from the central map through inter
    loops raise DisconnectedSession, or with ``strict=False`` are left out and
    reported in ``unaligned``.
    """
    cfg = config or PGOConfig()
    ids = [central.id] + [q.id for q in queries]
    if len(set(ids)) != len(ids):
        raise ValueError("session ids must be unique")
    reach = connected_sessions(central.id, ids, inter_loops)
    unaligned = [q.id for q in queries if q.id not in reach]
    if unaligned and strict:
        raise DisconnectedSession(unaligned)
    active = [q for q in queries if q.id in reach]
    loops = [lp for lp in inter_loops if lp.session_i in reach and lp.session_j in reach]

    anchors = {central.id: Pose()}
    if initial_anchors:
        anchors.update({k: v for k, v in initial_anchors.items() if k in reach})
    anchors = _initial_anchors(central, active, loops, anchors)

    graph = FactorGraph()
    graph.add_variable(("d", central.id), Pose(), fixed=True)
    for s in [central] + active:
        _add_session(graph, s.id, s.poses, s.loops, cfg)
    prior = np.eye(6) / cfg.anchor_prior_var
    for q in active:
        graph.add_variable(("d", q.id), anchors[q.id])
        graph.add(PriorFactor(("d", q.id), anchors[q.id], prior))
    for lp in loops:
        graph.add(
            AnchoredBetweenFactor(
                ("d", lp.session_j),
                ("x", lp.session_j, lp.j),
                ("d", lp.session_i),
                ("x", lp.session_i, lp.i),
                lp.T_ij,
                loop_information(lp.overlap, cfg),
                cfg.xi if cfg.robust_inter else None,
            )
        )
    res = graph.optimize(cfg.max_iters, cfg.tol, cfg.lambda0)
    out_poses, out_anchors, local = {}, {}, {}
    for s in [central] + active:
        d = res.values[("d", s.id)]
        loc = [res.values[("x", s.id, k)] for k in range(len(s.poses))]
        out_anchors[s.id] = d
        local[s.id] = loc
        out_poses[s.id] = [d @ x for x in loc]
    return MultiResult(out_poses, out_anchors, local, unaligned, res)


# -- g2o text ----------------------------------------------------------------

# our tangent order is (omega, v); g2o's information is (translation, rotation)
_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])


def _pose_fields(p: Pose):
    t, q = p.translation, p.quat
    return [t[0], t[1], t[2], q[1], q[2], q[3], q[0]]


def _parse_pose(vals):
    x, y, z, qx, qy, qz, qw = map(float, vals)
    return Pose((qw, qx, qy, qz), (x, y, z))


def write_g2o(path, poses: Sequence[Pose], factors: Sequence[BetweenFactor]):
    """Vertices are numbered by position in ``poses``; factor keys must be ints."""
    lines = []
    for i, p in enumerate(poses):
        lines.append("VERTEX_SE3:QUAT " + str(i) + " " + " ".join(f"{v:.17g}" for v in _pose_fields(p)))
    iu = np.triu_indices(6)
    for f in factors:
        info = np.asarray(f.information)[np.ix_(_G2O_PERM, _G2O_PERM)]
        vals = _pose_fields(f.z) + list(info[iu])
        lines.append(f"EDGE_SE3:QUAT {int(f.a)} {int(f.b)} " + " ".join(f"{v:.17g}" for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_g2o(path):
    poses: Dict[int, Pose] = {}
    factors = []
    inv = np.argsort(_G2O_PERM)
    iu = np.triu_indices(6)
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "VERTEX_SE3:QUAT":
                if len(parts) != 9:
                    raise ValueError(f"line {ln}: malformed vertex")
                poses[int(parts[1])] = _parse_pose(parts[2:9])
            elif parts[0] == "EDGE_SE3:QUAT":
                if len(parts) != 31:
                    raise ValueError(f"line {ln}: malformed edge")
                z = _parse_pose(parts[3:10])
                M = np.zeros((6, 6))
                M[iu] = list(map(float, parts[10:31]))
                M = M + M.T - np.diag(np.diag(M))
                factors.append(BetweenFactor(int(parts[1]), int(parts[2]), z, M[np.ix_(inv, inv)]))
            else:
                raise ValueError(f"line {ln}: unknown record {parts[0]}")
    order = sorted(poses)
    return [poses[k] for k in order], factors
