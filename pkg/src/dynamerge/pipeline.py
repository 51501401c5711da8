"""Per-session processing chain: keyframes, dynamic removal, description, intra loops, PGO."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .dynamic_removal import DynamicRemover, RemovalConfig, SegmentationResult, accumulate_keyframe
from .dynastd import DescriptorConfig, DescriptorHashTable, GlobalDescriptor, describe_segmented, to_ego_frame
from .geometry import Pose
from .loop_closure import LoopConfig, LoopPair, PlaneSet, detect
from .pose_graph import MapSession, PGOConfig, optimize_intra
from .voxel_map import VoxelMap


@dataclass
class Keyframe:
    index: int
    pose: Pose  # pose of the last scan in the group
    static: np.ndarray  # ego frame
    dynamic: np.ndarray  # ego frame
    descriptor: GlobalDescriptor  # ego frame
    planes: PlaneSet  # ego frame
    n_points: int = 0
    labels: Optional[np.ndarray] = None  # generator labels of the accumulated points, if known
    flags: Optional[np.ndarray] = None  # predicted dynamic flag per accumulated point
    scan_ids: Optional[np.ndarray] = None


@dataclass
class SessionProducts:
    id: int
    keyframes: List[Keyframe]
    loops: List[LoopPair] = field(default_factory=list)
    optimized: Optional[List[Pose]] = None

    @property
    def poses(self):
        return [k.pose for k in self.keyframes]

    def map_session(self, optimized=True) -> MapSession:
        poses = self.optimized if (optimized and self.optimized is not None) else self.poses
        table = DescriptorHashTable()
        for k in self.keyframes:
            table.insert(k.descriptor)
        return MapSession(
            self.id,
            list(poses),
            [k.static for k in self.keyframes],
            [k.descriptor for k in self.keyframes],
            table,
            list(self.loops),
        )


def keyframe_slices(n_scans, n_a=10):
    """Consecutive groups of ``n_a`` scans; a trailing partial group is dropped."""
    return [slice(k * n_a, (k + 1) * n_a) for k in range(n_scans // n_a)]


def process_session(
    scans: Sequence[np.ndarray],
    poses: Sequence[Pose],
    session_id=0,
    n_a=10,
    removal: Optional[RemovalConfig] = None,
    descriptor: Optional[DescriptorConfig] = None,
    use_removal=True,
    labels: Optional[Sequence[np.ndarray]] = None,
    ego_grid=False,
) -> SessionProducts:
    """Keyframe accumulation, online removal and description of one session.

    Descriptors are built on the session's map-frame voxel grid and then moved
    into the keyframe's ego frame. ``ego_grid`` voxelizes in the ego frame
    instead, which makes the grid follow the sensor.
    """
    if len(scans) != len(poses):
        raise ValueError(f"{len(scans)} scans but {len(poses)} poses")
    dcfg = descriptor or DescriptorConfig()
    remover = DynamicRemover(removal)
    kfs = []
    for k, sl in enumerate(keyframe_slices(len(scans), n_a)):
        group = [np.asarray(s, dtype=float)[:, :3] for s in scans[sl]]
        ps = list(poses[sl])
        cloud = accumulate_keyframe(group, ps)
        lab = np.concatenate([np.asarray(l) for l in labels[sl]]) if labels is not None else None
        pose = ps[-1]
        inv = pose.inverse()
        if use_removal:
            seg = remover.process(cloud, k)
            flags, ground = seg.dynamic, seg.is_ground
        else:
            flags, ground = np.zeros(len(cloud), dtype=bool), None
        desc, planes = describe_keyframe(cloud, flags, ground, pose, dcfg, k, ego_grid)
        kfs.append(
            Keyframe(
                k,
                pose,
                inv.apply(cloud[~flags]),
                inv.apply(cloud[flags]),
                desc,
                planes,
                len(cloud),
                lab,
                flags,
                np.concatenate([np.full(len(g), i) for i, g in enumerate(group)]),
            )
        )
    return SessionProducts(session_id, kfs)


def describe_keyframe(cloud, dynamic, is_ground, pose: Pose, config: Optional[DescriptorConfig] = None, frame_id=0, ego_grid=False):
    """(ego-frame descriptor, ego-frame plane set) of a map-frame keyframe cloud.

    ``dynamic`` marks removed points; voxels they dominate yield no keypoints.
    """
    cfg = config or DescriptorConfig()
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    dyn = np.asarray(dynamic, dtype=bool).reshape(-1)
    seg = SegmentationResult(pts, dyn, None if is_ground is None else np.asarray(is_ground, bool))
    df = describe_segmented(seg, cfg, frame_id, frame=pose if ego_grid else None)
    desc = df.descriptor if ego_grid else to_ego_frame(df.descriptor, pose)
    return desc, PlaneSet.from_map(df.vmap, None if ego_grid else pose)


def keyframe_planes(static_ego, pose: Pose, config: Optional[DescriptorConfig] = None, ego_grid=False) -> PlaneSet:
    """Plane set of a stored ego-frame static cloud, on the same grid the descriptor used."""
    cfg = config or DescriptorConfig()
    P = np.asarray(static_ego, dtype=float).reshape(-1, 3)
    if ego_grid:
        return PlaneSet.from_map(VoxelMap(P, cfg.leaf, cfg.lambda_th, cfg.min_pts))
    return PlaneSet.from_map(VoxelMap(pose.apply(P), cfg.leaf, cfg.lambda_th, cfg.min_pts), pose)


def detect_intra_loops(products: SessionProducts, config: Optional[LoopConfig] = None) -> List[LoopPair]:
    """Each keyframe queried against earlier keyframes at least ``min_gap`` away."""
    cfg = config or LoopConfig()
    table = DescriptorHashTable()
    planes = {k.index: k.planes for k in products.keyframes}
    loops = []
    for kf in products.keyframes:
        old = kf.index - cfg.min_gap - 1
        if old >= 0:
            table.insert(products.keyframes[old].descriptor)
        if len(table) == 0:
            continue
        lp = detect(kf.descriptor, table, planes, cfg, kind="intra")
        if lp is not None:
            lp.session_i = lp.session_j = products.id
            loops.append(lp)
    return loops


def optimize_session(products: SessionProducts, loop_cfg=None, pgo_cfg: Optional[PGOConfig] = None, detect_loops=True):
    if detect_loops:
        products.loops = detect_intra_loops(products, loop_cfg)
    products.optimized = optimize_intra(products.poses, products.loops, pgo_cfg)
    return products
