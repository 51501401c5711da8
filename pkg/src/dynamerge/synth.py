"""Deterministic synthetic worlds, ray-cast LiDAR scans and drifting odometry.

Worlds are a horizontal ground plane plus axis-aligned boxes (walls, poles and
crates are all boxes). Moving actors are box proxies following piecewise
linear paths. Every random draw comes from a counter-based Philox stream keyed
by (seed, frame) so output never depends on scheduling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .geometry import Pose, exp_map, from_xyz_yaw, relative

GROUND, STATIC, DYNAMIC = 0, 1, 2

# ground and box faces sit mid-cell on a 0.2 m lattice so sensor noise does not
# straddle fine-voxel boundaries
GROUND_Z = -0.1
SNAP = 0.2


class InvalidSpec(ValueError):
    pass


def rng_for(seed, *counters) -> np.random.Generator:
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, _mix(counters)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _mix(counters):
    h = 0x9E3779B97F4A7C15
    for c in counters:
        h = ((h ^ (int(c) & 0xFFFFFFFFFFFFFFFF)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 31
    return h


@dataclass
class Box:
    lo: tuple
    hi: tuple
    name: str = "box"


@dataclass
class Actor:
    size: tuple  # (sx, sy, sz)
    waypoints: list  # [(x, y), ...]
    speed: float = 1.2
    phase: float = 0.0  # seconds of head start

    def position(self, t):
        """Centre (x, y) at time t, ping-ponging along the waypoint polyline."""
        wp = np.asarray(self.waypoints, dtype=float)
        if len(wp) == 1 or self.speed == 0:
            return wp[0].copy()
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        total = seg.sum()
        s = (self.speed * (t + self.phase)) % (2 * total)
        if s > total:
            s = 2 * total - s
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        a = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        return wp[k] + a * (wp[k + 1] - wp[k])

    def box_at(self, t, ground_z=GROUND_Z):
        c = self.position(t)
        h = np.asarray(self.size, dtype=float) / 2
        lo = np.array([c[0] - h[0], c[1] - h[1], ground_z])
        hi = np.array([c[0] + h[0], c[1] + h[1], ground_z + self.size[2]])
        return lo, hi


@dataclass
class WorldSpec:
    seed: int = 0
    boxes: List[Box] = field(default_factory=list)
    actors: List[Actor] = field(default_factory=list)
    extent: tuple = (-60.0, 60.0, -60.0, 60.0)
    ground_z: float = GROUND_Z


class World:
    def __init__(self, spec: WorldSpec):
        self.spec = spec
        self.ground_z = float(spec.ground_z)
        self.lo = np.array([b.lo for b in spec.boxes], dtype=float).reshape(-1, 3)
        self.hi = np.array([b.hi for b in spec.boxes], dtype=float).reshape(-1, 3)
        self.actors = list(spec.actors)

    def boxes_at(self, t):
        """Static boxes then actor boxes at time t, with labels and actor ids."""
        if not self.actors:
            return self.lo, self.hi, np.full(len(self.lo), STATIC), np.zeros(len(self.lo), dtype=np.int64)
        alo, ahi = zip(*(a.box_at(t, self.ground_z) for a in self.actors))
        lo = np.vstack([self.lo, np.array(alo)])
        hi = np.vstack([self.hi, np.array(ahi)])
        lab = np.concatenate([np.full(len(self.lo), STATIC), np.full(len(self.actors), DYNAMIC)])
        ids = np.concatenate([np.zeros(len(self.lo), dtype=np.int64), np.arange(1, len(self.actors) + 1)])
        return lo, hi, lab, ids

    def to_bytes(self) -> bytes:
        out = [struct.pack("<Qd4d", self.spec.seed & 0xFFFFFFFFFFFFFFFF, self.ground_z, *self.spec.extent)]
        out.append(struct.pack("<I", len(self.lo)))
        out.append(np.concatenate([self.lo, self.hi], axis=1).astype("<f8").tobytes())
        out.append(struct.pack("<I", len(self.actors)))
        for a in self.actors:
            out.append(struct.pack("<3dddI", *a.size, a.speed, a.phase, len(a.waypoints)))
            out.append(np.asarray(a.waypoints, dtype="<f8").tobytes())
        return b"".join(out)

    @property
    def primitive_count(self):
        return 1 + len(self.lo)


def _boxes_overlap(lo1, hi1, lo2, hi2, margin=0.0):
    return bool(np.all(lo1 - margin < hi2) and np.all(lo2 - margin < hi1))


def generate_world(spec: WorldSpec) -> World:
    for b in spec.boxes:
        if not np.all(np.asarray(b.hi, float) > np.asarray(b.lo, float)):
            raise InvalidSpec(f"box {b.name} has non-positive size")
    x0, x1, y0, y1 = spec.extent
    if not (x1 > x0 and y1 > y0):
        raise InvalidSpec("empty extent")
    world = World(spec)
    for i, a in enumerate(spec.actors):
        if len(a.waypoints) == 0 or min(a.size) <= 0 or a.speed < 0:
            raise InvalidSpec(f"actor {i} malformed")
        wp = np.asarray(a.waypoints, dtype=float)
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1).sum() if len(wp) > 1 else 0.0
        for s in np.linspace(0.0, 1.0, max(2, int(seg / 0.1) + 1)):
            t = s * seg / a.speed if a.speed > 0 else 0.0
            lo, hi = Actor(a.size, a.waypoints, a.speed, 0.0).box_at(t, world.ground_z)
            for j in range(len(world.lo)):
                if _boxes_overlap(lo, hi, world.lo[j], world.hi[j]):
                    raise InvalidSpec(f"actor {i} intersects static box {j}")
    return world


@dataclass
class SensorModel:
    hfov: float = 360.0  # degrees
    vfov: float = 45.0
    h_res: float = 1.0  # degrees between columns
    channels: int = 16
    v_center: float = 0.0
    max_range: float = 60.0
    min_range: float = 0.5
    noise: float = 0.01  # metres, along the ray
    h_center: float = 0.0

    def __post_init__(self):
        if not (0 < self.hfov <= 360 and 0 < self.vfov < 180):
            raise InvalidSpec("field of view out of range")

    def directions(self):
        """Unit ray directions in the sensor frame (x forward, z up)."""
        if self.hfov >= 360.0:
            n_h = int(round(360.0 / self.h_res))
            az = -180.0 + self.h_res * np.arange(n_h)
        else:
            n_h = int(math.floor(self.hfov / self.h_res)) + 1
            az = -self.hfov / 2 + self.h_res * np.arange(n_h)
        az = np.radians(az + self.h_center)
        el = np.radians(np.linspace(self.v_center - self.vfov / 2, self.v_center + self.vfov / 2, self.channels))
        A, E = np.meshgrid(az, el, indexing="ij")
        ce = np.cos(E)
        return np.stack([ce * np.cos(A), ce * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def spinning(**kw) -> SensorModel:
    base = dict(hfov=360.0, vfov=45.0, h_res=1.0, channels=16, v_center=-10.0)
    base.update(kw)
    return SensorModel(**base)


def solid_state(**kw) -> SensorModel:
    base = dict(hfov=70.0, vfov=77.0, h_res=0.5, channels=60, v_center=-10.0)
    base.update(kw)
    return SensorModel(**base)


@dataclass
class LabeledScan:
    points: np.ndarray  # sensor frame
    labels: np.ndarray  # GROUND / STATIC / DYNAMIC
    actor_ids: np.ndarray  # 0 for non-actor hits
    time: float = 0.0


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def cast_rays(origin, dirs, world: World, t, max_range):
    """First hit distance per ray (inf for misses), label and actor id."""
    o = np.asarray(origin, dtype=float)
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    R = len(d)
    lab = np.full(R, -1, dtype=np.int64)
    ids = np.zeros(R, dtype=np.int64)
    down = d[:, 2] < 0
    best = np.where(down, (world.ground_z - o[2]) / d[:, 2], np.inf)
    best[best <= 0] = np.inf
    lab[np.isfinite(best)] = GROUND

    lo, hi, blab, bids = world.boxes_at(t)
    if not len(lo):
        return best, lab, ids
    # horizontal distance from the sensor to each footprint rectangle
    gap = np.maximum(np.maximum(lo[:, :2] - o[:2], o[:2] - hi[:, :2]), 0.0)
    rho_min = np.linalg.norm(gap, axis=1)
    keep = rho_min < max_range
    lo, hi, blab, bids, rho_min = lo[keep], hi[keep], blab[keep], bids[keep], rho_min[keep]

    az = np.arctan2(d[:, 1], d[:, 0])
    order = np.argsort(az, kind="stable")
    az_s = az[order]
    el = np.arctan2(d[:, 2], np.hypot(d[:, 0], d[:, 1]))
    inv = 1.0 / d
    for j in range(len(lo)):
        if rho_min[j] <= 1e-9:
            cand = np.arange(R)
        else:
            cx = np.array([lo[j, 0], hi[j, 0], hi[j, 0], lo[j, 0]]) - o[0]
            cy = np.array([lo[j, 1], lo[j, 1], hi[j, 1], hi[j, 1]]) - o[1]
            ca = np.arctan2(cy, cx)
            mid = math.atan2(0.5 * (lo[j, 1] + hi[j, 1]) - o[1], 0.5 * (lo[j, 0] + hi[j, 0]) - o[0])
            span = float(np.abs(_wrap(ca - mid)).max()) + 1e-9
            a0, a1 = mid - span, mid + span
            parts = []
            for lo_a, hi_a in ((a0, a1), (a0 - 2 * np.pi, a1 - 2 * np.pi), (a0 + 2 * np.pi, a1 + 2 * np.pi)):
                i0 = np.searchsorted(az_s, lo_a, side="left")
                i1 = np.searchsorted(az_s, hi_a, side="right")
                if i1 > i0:
                    parts.append(order[i0:i1])
            if not parts:
                continue
            cand = np.concatenate(parts) if len(parts) > 1 else parts[0]
            rho_max = float(np.hypot(cx, cy).max())
            dz0, dz1 = lo[j, 2] - o[2], hi[j, 2] - o[2]
            e_lo = math.atan2(dz0, rho_min[j] if dz0 < 0 else rho_max)
            e_hi = math.atan2(dz1, rho_min[j] if dz1 > 0 else rho_max)
            ec = el[cand]
            cand = cand[(ec >= e_lo - 1e-9) & (ec <= e_hi + 1e-9)]
        if cand.size == 0:
            continue
        t1 = (lo[j] - o) * inv[cand]
        t2 = (hi[j] - o) * inv[cand]
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmin > 0) & (tmin < best[cand])
        c = cand[hit]
        best[c] = tmin[hit]
        lab[c] = blab[j]
        ids[c] = bids[j]
    return best, lab, ids


def simulate_scan(world: World, pose: Pose, sensor: SensorModel, time=0.0, seed=0, frame=0) -> LabeledScan:
    dirs_s = sensor.directions()
    dirs_w = pose.rotate(dirs_s)
    rng = rng_for(seed, frame)
    noise = rng.standard_normal(len(dirs_s)) * sensor.noise
    r, lab, ids = cast_rays(pose.translation, dirs_w, world, time, sensor.max_range)
    keep = np.isfinite(r) & (r <= sensor.max_range) & (r >= sensor.min_range)
    rr = r[keep] + noise[keep]
    pts = dirs_s[keep] * rr[:, None]
    return LabeledScan(pts, lab[keep], ids[keep], float(time))


@dataclass
class DriftModel:
    trans_scale: float = 0.0  # fraction of each step's translation added as error
    yaw_per_step: float = 0.0  # radians
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    seed: int = 0

    def step(self, rel: Pose, k: int) -> Pose:
        xi = np.zeros(6)
        xi[2] = self.yaw_per_step
        if self.sigma_rot or self.sigma_trans:
            g = rng_for(self.seed, 1 << 32, k).standard_normal(6)
            xi[:3] += self.sigma_rot * g[:3]
            xi[3:] += self.sigma_trans * g[3:]
        D = exp_map(xi)
        return Pose(D.quat, D.translation + self.trans_scale * rel.translation)


def apply_drift(poses: Sequence[Pose], drift: Optional[DriftModel]) -> List[Pose]:
    """x'_0 = x_0 and x'_{k+1} = x'_k * (x_k^-1 x_{k+1}) * D_k."""
    if not poses:
        return []
    out = [poses[0]]
    for k in range(len(poses) - 1):
        rel = relative(poses[k], poses[k + 1])
        step = rel if drift is None else rel @ drift.step(rel, k)
        out.append(out[-1] @ step)
    return out


def yaw_drift_endpoint(step, yaw, n):
    """Closed-form end position of n straight steps with constant yaw drift."""
    if abs(yaw) < 1e-150:
        # first-order expansion; sin(yaw / 2) underflows down here
        return np.array([n * step, step * yaw * n * (n - 1) / 2])
    s = step * math.sin(n * yaw / 2) / math.sin(yaw / 2)
    return np.array([s * math.cos((n - 1) * yaw / 2), s * math.sin((n - 1) * yaw / 2)])


@dataclass
class SessionData:
    scans: List[LabeledScan]
    true_poses: List[Pose]
    poses: List[Pose]  # odometry estimate (possibly drifted)
    times: np.ndarray


def generate_session(world, trajectory, sensor, rate=10.0, drift=None, seed=0, t0=0.0, frame_offset=0):
    """Scans along ``trajectory`` at ``rate`` Hz plus true and drifted poses."""
    times = t0 + np.arange(len(trajectory)) / rate
    scans = [
        simulate_scan(world, p, sensor, times[i], seed, frame_offset + i) for i, p in enumerate(trajectory)
    ]
    return SessionData(scans, list(trajectory), apply_drift(list(trajectory), drift), times)


# -- trajectories ------------------------------------------------------------


def polyline_trajectory(waypoints, step, height=1.6, yaw_offset=0.0):
    """Poses every ``step`` metres along a polyline, heading along travel."""
    wp = np.asarray(waypoints, dtype=float)
    out = []
    carry = 0.0
    for a, b in zip(wp[:-1], wp[1:]):
        seg = b - a
        L = float(np.linalg.norm(seg))
        yaw = math.atan2(seg[1], seg[0]) + yaw_offset
        s = carry
        while s < L - 1e-9:
            p = a + seg * (s / L)
            out.append(from_xyz_yaw(p[0], p[1], height, yaw))
            s += step
        carry = s - L
    end = wp[-1]
    last = wp[-1] - wp[-2]
    out.append(from_xyz_yaw(end[0], end[1], height, math.atan2(last[1], last[0]) + yaw_offset))
    return out


def square_loop(side=10.0, step=1.0):
    """Closed square; the last pose coincides with the first (revisit)."""
    n = int(round(side / step))
    poses = []
    for edge in range(4):
        yaw = edge * math.pi / 2
        start = [np.array([0.0, 0.0]), np.array([side, 0.0]), np.array([side, side]), np.array([0.0, side])][edge]
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        for k in range(n):
            p = start + heading * step * k
            poses.append(from_xyz_yaw(p[0], p[1], 0.0, yaw))
    poses.append(from_xyz_yaw(0.0, 0.0, 0.0, 2 * math.pi))
    return poses


# -- reference scenes --------------------------------------------------------


def _snap(v):
    return SNAP * np.round((np.asarray(v, dtype=float) - SNAP / 2) / SNAP) + SNAP / 2


def snapped_box(lo, hi, name="box"):
    lo = _snap(lo)
    hi = _snap(hi)
    hi = np.maximum(hi, lo + SNAP)
    return Box(tuple(lo.tolist()), tuple(hi.tolist()), name)


def street_world(
    seed=0,
    length=120.0,
    width=16.0,
    n_walkers=3,
    n_clutter=40,
    walker_speed=1.2,
    walker_x=(20.0, 60.0),
):
    """Street lined by buildings, parked cars, crates, poles and trees.

    The street runs along +x from 0 to ``length``; the road is |y| < width/2.
    Facades carry pilasters so corners are plentiful. Walkers start inside
    ``walker_x`` and walk 90 m towards -x, passing a sensor that drives along +x.
    """
    rng = rng_for(seed, 0xC0FFEE)
    gz = GROUND_Z
    half = width / 2
    boxes = []
    for sgn in (-1, 1):
        x = -15.0
        while x < length + 15:
            seg = float(rng.uniform(6, 18))
            gap = float(rng.uniform(2, 6))
            h = float(rng.uniform(3.0, 7.0))
            y_face = sgn * (half + float(rng.uniform(0.5, 3.0)))
            y_back = y_face + sgn * 0.6
            boxes.append(snapped_box((x, min(y_face, y_back), gz), (x + seg, max(y_face, y_back), gz + h), "wall"))
            px = x + float(rng.uniform(0.5, 3.0))
            while px < x + seg - 1.0:
                pw = float(rng.uniform(0.4, 1.0))
                pd = float(rng.uniform(0.3, 0.8))
                ph = h if rng.uniform() < 0.5 else float(rng.uniform(1.0, h))
                y_in = y_face - sgn * pd
                boxes.append(snapped_box((px, min(y_face, y_in), gz), (px + pw, max(y_face, y_in), gz + ph), "pilaster"))
                px += pw + float(rng.uniform(2.0, 5.0))
            x += seg + gap
    # parked cars along both kerbs
    for sgn in (-1, 1):
        x = float(rng.uniform(-10, 0))
        while x < length + 10:
            L = float(rng.uniform(3.8, 4.8))
            if rng.uniform() < 0.6:
                yc = sgn * (half - 1.6)
                hc = float(rng.uniform(1.3, 1.7))
                boxes.append(snapped_box((x, yc - 0.9, gz), (x + L, yc + 0.9, gz + hc), "car"))
            x += L + float(rng.uniform(1.5, 8.0))
    # crates, poles and trees on the pavement edge
    for i in range(n_clutter):
        cx = float(rng.uniform(-5, length + 5))
        sgn = 1 if rng.uniform() < 0.5 else -1
        cy = sgn * float(rng.uniform(half - 0.5, half + 0.3))
        kind = rng.uniform()
        if kind < 0.4:
            sx, sy = float(rng.uniform(0.5, 1.4)), float(rng.uniform(0.5, 1.4))
            hc = float(rng.uniform(0.6, 1.8))
            boxes.append(snapped_box((cx - sx / 2, cy - sy / 2, gz), (cx + sx / 2, cy + sy / 2, gz + hc), "crate"))
        elif kind < 0.7:
            hc = float(rng.uniform(2.8, 5.0))
            boxes.append(snapped_box((cx - 0.1, cy - 0.1, gz), (cx + 0.1, cy + 0.1, gz + hc), "pole"))
        else:
            top = float(rng.uniform(4.0, 6.0))
            r = float(rng.uniform(1.0, 1.8))
            boxes.append(snapped_box((cx - 0.2, cy - 0.2, gz), (cx + 0.2, cy + 0.2, gz + top - 1.5), "trunk"))
            boxes.append(snapped_box((cx - r, cy - r, gz + top - 1.5), (cx + r, cy + r, gz + top), "canopy"))
    actors = []
    for w in range(n_walkers):
        for _ in range(200):
            # long one-way walks so a walker never retraces its own footprint
            sgn = 1 if rng.uniform() < 0.5 else -1
            y0 = sgn * float(rng.uniform(1.5, 4.0))
            y1 = sgn * float(rng.uniform(1.5, 4.0))
            x0 = float(rng.uniform(*walker_x))
            a = Actor((0.5, 0.5, 1.7), [(x0, y0), (x0 - 90.0, y1)], walker_speed, 0.0)
            if _actor_clear(a, boxes, gz):
                actors.append(a)
                break
    return generate_world(WorldSpec(seed, boxes, actors, (-20.0, length + 20, -width, width), gz))


def _actor_clear(actor, boxes, gz, margin=1.0):
    wp = np.asarray(actor.waypoints, dtype=float)
    L = np.linalg.norm(np.diff(wp, axis=0), axis=1).sum()
    for s in np.linspace(0, 1, int(L / 0.2) + 2):
        p = wp[0] + s * (wp[-1] - wp[0]) if len(wp) == 2 else actor.position(s * L / actor.speed)
        h = np.asarray(actor.size) / 2
        lo = np.array([p[0] - h[0], p[1] - h[1], gz])
        hi = np.array([p[0] + h[0], p[1] + h[1], gz + actor.size[2]])
        for b in boxes:
            if _boxes_overlap(lo, hi, np.asarray(b.lo), np.asarray(b.hi), margin):
                return False
    return True


def without_actors(world: World) -> World:
    s = world.spec
    return World(WorldSpec(s.seed, list(s.boxes), [], s.extent, s.ground_z))
