"""Command-line pipeline: every stage reads the previous stage's files from the output directory."""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List

import numpy as np

from . import io
from .config import ConfigError, PipelineConfig, SessionEntry, config_text, load_config
from .dynamic_removal import DynamicRemover, accumulate_keyframe
from .dynastd import DescriptorHashTable
from .evaluation import (
    EmptyClass,
    NoAssociations,
    NoInliers,
    ScoredMatch,
    associate,
    ate,
    error_stats,
    map_quality,
    pr_curve,
    removal_score,
    translation_errors,
)
from .geometry import from_xyz_yaw
from .loop_closure import LoopPair
from .pipeline import Keyframe, SessionProducts, describe_keyframe, detect_intra_loops, keyframe_planes, keyframe_slices
from .pose_graph import MapSession, optimize_intra
from .registration import build_unified, map_diff, merge_sessions, voxel_downsample

STAGES = ("remove-dynamics", "describe", "loop-detect", "optimize", "merge", "diff", "eval")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


# -- layout ------------------------------------------------------------------


def sdir(cfg, sid, *parts):
    return os.path.join(cfg.out_dir, f"session_{sid}", *parts)


def mdir(cfg, *parts):
    return os.path.join(cfg.out_dir, "merged", *parts)


def kf_name(k, ext):
    return f"kf_{k:06d}{ext}"


def _mkdirs(*paths):
    for p in paths:
        os.makedirs(p, exist_ok=True)


def _map_sessions(cfg: PipelineConfig, fn):
    """Run ``fn(session)`` for every session, in parallel up to ``threads``; results in id order."""
    if cfg.threads > 1 and len(cfg.sessions) > 1:
        with ThreadPoolExecutor(min(cfg.threads, len(cfg.sessions))) as ex:
            return list(ex.map(fn, cfg.sessions))
    return [fn(s) for s in cfg.sessions]


def _require(path, what, sid):
    if path is None or not os.path.exists(path):
        raise ConfigError(f"session {sid}: {what} {path} not found")
    return path


def _read_keyframes(cfg, sid):
    times, poses = io.read_tum(_require(sdir(cfg, sid, "keyframes.tum"), "keyframe poses", sid))
    return times, poses


# -- synth ---------------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig):
    """Two-session street scenario: the query session lives in a frame offset by a known pose."""
    from . import synth

    sc = cfg.synth
    world = synth.street_world(cfg.seed, n_walkers=sc.n_walkers)
    G = from_xyz_yaw(sc.offset_x, sc.offset_y, 0.0, math.radians(sc.offset_yaw))
    step = 0.1
    length = sc.frames * step + 1.0
    ta = synth.polyline_trajectory([(0.0, 0.0), (length, 0.0)], step)[: sc.frames]
    tb = synth.polyline_trajectory([(sc.query_start, sc.query_lateral), (sc.query_start + length, sc.query_lateral)], step)[: sc.frames]
    specs = [
        (0, ta, synth.spinning(), 0.0, None),
        (1, tb, synth.spinning(hfov=sc.query_fov), sc.query_t0, G),
    ]
    data = os.path.join(cfg.out_dir, "data")
    sessions = []
    for sid, traj, sensor, t0, frame in specs:
        s = synth.generate_session(world, traj, sensor, seed=cfg.seed + sid, t0=t0)
        root = os.path.join(data, f"session_{sid}")
        _mkdirs(os.path.join(root, "clouds"), os.path.join(root, "labels"))
        for k, scan in enumerate(s.scans):
            io.write_bin(os.path.join(root, "clouds", f"{k:06d}.bin"), scan.points)
            io.write_labels(os.path.join(root, "labels", f"{k:06d}.label"), (scan.labels == synth.DYNAMIC).astype(np.uint32))
        local = s.poses if frame is None else [frame.inverse() @ p for p in s.poses]
        io.write_tum(os.path.join(root, "poses.tum"), s.times, local)
        io.write_tum(os.path.join(root, "gt.tum"), s.times, s.true_poses)
        sessions.append(
            SessionEntry(
                sid,
                os.path.join(root, "clouds"),
                os.path.join(root, "poses.tum"),
                os.path.join(root, "labels"),
                os.path.join(root, "gt.tum"),
            )
        )
    out = PipelineConfig(**{**cfg.__dict__, "sessions": sessions, "central": 0, "out_dir": "."})
    with open(os.path.join(cfg.out_dir, "config.ini"), "w") as fh:
        fh.write(config_text(out, sessions_relative_to=cfg.out_dir))
    return sessions


# -- stages ------------------------------------------------------------------


def _remove_session(cfg: PipelineConfig, s: SessionEntry):
    clouds = io.list_clouds(_require(s.clouds, "cloud directory", s.id))
    times, poses = io.read_tum(_require(s.poses, "pose file", s.id))
    if len(clouds) != len(poses):
        raise ConfigError(f"session {s.id}: {len(clouds)} clouds but {len(poses)} poses")
    labels = None
    if s.labels is not None:
        lab_files = sorted(os.path.join(s.labels, f) for f in os.listdir(_require(s.labels, "label directory", s.id)) if f.endswith(".label"))
        if len(lab_files) != len(clouds):
            raise ConfigError(f"session {s.id}: {len(lab_files)} label files for {len(clouds)} clouds")
        labels = lab_files
    subdirs = ["keyframes", "static", "dynamic", "dynamic_labels", "ground"] + (["gt_labels"] if labels else [])
    _mkdirs(*(sdir(cfg, s.id, d) for d in subdirs))
    remover = DynamicRemover(cfg.removal)
    kf_times, kf_poses = [], []
    for k, sl in enumerate(keyframe_slices(len(clouds), cfg.n_a)):
        scans = [io.load_cloud(p) for p in clouds[sl]]
        ps = poses[sl]
        cloud = accumulate_keyframe(scans, ps)
        pose = ps[-1]
        inv = pose.inverse()
        if cfg.use_removal:
            seg = remover.process(cloud, k)
            dyn, ground = seg.dynamic, seg.is_ground
        else:
            dyn, ground = np.zeros(len(cloud), dtype=bool), np.zeros(len(cloud), dtype=bool)
        ego = inv.apply(cloud)
        io.write_bin(sdir(cfg, s.id, "keyframes", kf_name(k, ".bin")), ego)
        io.write_bin(sdir(cfg, s.id, "static", kf_name(k, ".bin")), ego[~dyn])
        io.write_bin(sdir(cfg, s.id, "dynamic", kf_name(k, ".bin")), ego[dyn])
        io.write_labels(sdir(cfg, s.id, "dynamic_labels", kf_name(k, ".label")), dyn.astype(np.uint32))
        io.write_labels(sdir(cfg, s.id, "ground", kf_name(k, ".label")), np.asarray(ground, bool).astype(np.uint32))
        if labels:
            gt = np.concatenate([io.load_labels(p) for p in labels[sl]])
            io.write_labels(sdir(cfg, s.id, "gt_labels", kf_name(k, ".label")), gt)
        kf_times.append(times[sl][-1])
        kf_poses.append(pose)
    io.write_tum(sdir(cfg, s.id, "keyframes.tum"), kf_times, kf_poses)
    return len(kf_poses)


def stage_remove(cfg: PipelineConfig):
    return _map_sessions(cfg, lambda s: _remove_session(cfg, s))


def _load_kf(cfg, sid, k, sub, ext=".bin"):
    p = sdir(cfg, sid, sub, kf_name(k, ext))
    return io.load_cloud(p) if ext == ".bin" else io.load_labels(p)


def _describe_session(cfg: PipelineConfig, s: SessionEntry):
    _, poses = _read_keyframes(cfg, s.id)
    descs = []
    for k, pose in enumerate(poses):
        ego = _load_kf(cfg, s.id, k, "keyframes")
        dyn = _load_kf(cfg, s.id, k, "dynamic_labels", ".label").astype(bool)
        ground = _load_kf(cfg, s.id, k, "ground", ".label").astype(bool)
        d, _ = describe_keyframe(pose.apply(ego), dyn, ground, pose, cfg.descriptor, k, cfg.ego_grid)
        descs.append(d)
    io.write_descriptors(sdir(cfg, s.id, "descriptors.dstd"), descs)
    return sum(len(d) for d in descs)


def stage_describe(cfg: PipelineConfig):
    return _map_sessions(cfg, lambda s: _describe_session(cfg, s))


def _session_products(cfg, sid, optimized=False) -> SessionProducts:
    _, poses = _read_keyframes(cfg, sid)
    descs = io.read_descriptors(_require(sdir(cfg, sid, "descriptors.dstd"), "descriptors", sid), range(len(poses)))
    descs.sort(key=lambda d: d.frame_id)
    kfs = []
    for k, pose in enumerate(poses):
        static = _load_kf(cfg, sid, k, "static")
        kfs.append(Keyframe(k, pose, static, np.zeros((0, 3)), descs[k], keyframe_planes(static, pose, cfg.descriptor, cfg.ego_grid)))
    prod = SessionProducts(sid, kfs)
    if optimized:
        _, prod.optimized = io.read_tum(_require(sdir(cfg, sid, "optimized.tum"), "optimized poses", sid))
        prod.loops = io.read_loops(sdir(cfg, sid, "loops_intra.txt"))
    return prod


def _loops_session(cfg, s):
    prod = _session_products(cfg, s.id)
    loops = detect_intra_loops(prod, cfg.loop)
    io.write_loops(sdir(cfg, s.id, "loops_intra.txt"), loops)
    return len(loops)


def stage_loops(cfg: PipelineConfig):
    return _map_sessions(cfg, lambda s: _loops_session(cfg, s))


def _optimize_session(cfg, s):
    times, poses = _read_keyframes(cfg, s.id)
    loops = io.read_loops(_require(sdir(cfg, s.id, "loops_intra.txt"), "intra loop report", s.id))
    for lp in loops:
        lp.session_i = lp.session_j = s.id
    opt = optimize_intra(poses, loops, cfg.pgo)
    io.write_tum(sdir(cfg, s.id, "optimized.tum"), times, opt)
    return len(loops)


def stage_optimize(cfg: PipelineConfig):
    return _map_sessions(cfg, lambda s: _optimize_session(cfg, s))


def _map_session(cfg, sid) -> MapSession:
    prod = _session_products(cfg, sid, optimized=True)
    table = DescriptorHashTable(cfg.descriptor.side_res, cfg.descriptor.dot_res)
    for k in prod.keyframes:
        table.insert(k.descriptor)
    return MapSession(sid, list(prod.optimized), [k.static for k in prod.keyframes], [k.descriptor for k in prod.keyframes], table, list(prod.loops))


def stage_merge(cfg: PipelineConfig):
    cid = cfg.central_id
    sessions = {s.id: _map_session(cfg, s.id) for s in cfg.sessions}
    queries = [sessions[s.id] for s in cfg.sessions if s.id != cid]
    res = merge_sessions(sessions[cid], queries, cfg.merge_config())
    _mkdirs(mdir(cfg))
    for sid in sorted(res.poses):
        times, _ = _read_keyframes(cfg, sid)
        io.write_tum(mdir(cfg, f"session_{sid}.tum"), times, res.poses[sid])
        if res.phase1 is not None and sid in res.phase1.poses:
            io.write_tum(mdir(cfg, f"phase1_session_{sid}.tum"), times, res.phase1.poses[sid])
    for q in queries:
        io.write_loops(mdir(cfg, f"loops_inter_{q.id}.txt"), [lp for lp in res.inter_loops if lp.session_i == q.id])
    pairs: Dict[tuple, List[LoopPair]] = {}
    for lp in res.radius_loops:
        pairs.setdefault((lp.session_j, lp.session_i), []).append(lp)
    for (a, b), lps in sorted(pairs.items()):
        io.write_loops(mdir(cfg, f"loops_radius_{a}_{b}.txt"), lps)
    with open(mdir(cfg, "unaligned.txt"), "w") as fh:
        fh.write("".join(f"{sid}\n" for sid in res.unaligned))
    # export static and removed points of every aligned session in the central frame
    pts, sids, dyn = [], [], []
    for sid in sorted(res.poses):
        for k, p in enumerate(res.poses[sid]):
            st = _load_kf(cfg, sid, k, "static")
            dy = _load_kf(cfg, sid, k, "dynamic")
            pts += [p.apply(st), p.apply(dy)]
            sids += [np.full(len(st) + len(dy), sid)]
            dyn += [np.zeros(len(st)), np.ones(len(dy))]
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    io.write_map(mdir(cfg, "map.bin"), P, np.concatenate(sids) if sids else [], np.concatenate(dyn) if dyn else None)
    return res


def _merged_static(cfg, sid, poses):
    return [p.apply(_load_kf(cfg, sid, k, "static")) for k, p in enumerate(poses)]


def _merged_poses(cfg):
    out = {}
    for s in cfg.sessions:
        p = mdir(cfg, f"session_{s.id}.tum")
        if os.path.exists(p):
            out[s.id] = io.read_tum(p)
    return out


def stage_diff(cfg: PipelineConfig):
    """What the query sessions changed relative to the central session's map."""
    cid = cfg.central_id
    merged = _merged_poses(cfg)
    if cid not in merged:
        raise ConfigError("merged trajectories missing; run the merge stage first")
    leaf = cfg.merge.unified_leaf
    prior = build_unified(_merged_static(cfg, cid, merged[cid][1]), leaf)
    clouds, ids = [], []
    for sid in sorted(merged):
        c = _merged_static(cfg, sid, merged[sid][1])
        clouds += c
        ids += [sid] * len(c)
    current = build_unified(clouds, leaf, ids, reference=cid)
    added, removed = map_diff(prior, current, cfg.eval.diff_tau)
    _mkdirs(os.path.join(cfg.out_dir, "diff"))
    io.write_bin(os.path.join(cfg.out_dir, "diff", "added.bin"), added)
    io.write_bin(os.path.join(cfg.out_dir, "diff", "removed.bin"), removed)
    report = {
        "prior_points": len(prior),
        "current_points": len(current),
        "added": len(added),
        "removed": len(removed),
        "tau_d": cfg.eval.diff_tau,
    }
    io.write_metrics(os.path.join(cfg.out_dir, "diff", "report.txt"), report)
    return report


def _removal_metrics(cfg, s):
    gt_dir = sdir(cfg, s.id, "gt_labels")
    if not os.path.isdir(gt_dir):
        return None
    n = len(_read_keyframes(cfg, s.id)[1])
    tot = np.zeros(4, dtype=np.int64)
    for k in range(n):
        gt = io.dynamic_mask(_load_kf(cfg, s.id, k, "gt_labels", ".label"), cfg.eval.label_scheme)
        pred = _load_kf(cfg, s.id, k, "dynamic_labels", ".label").astype(bool)
        ego = _load_kf(cfg, s.id, k, "keyframes")
        if not gt.any():
            # keyframes without actors still count their static points
            kept = voxel_downsample(ego[~pred], cfg.eval.standard_leaf)
            allp = voxel_downsample(ego, cfg.eval.standard_leaf)
            tot += [len(kept), len(allp), 0, 0]
            continue
        r = removal_score(pred, gt, cfg.eval.standard_leaf, ego)
        tot += [r.n_true_static, r.n_total_static, r.n_true_dynamic, r.n_total_dynamic]
    if tot[1] == 0 or tot[3] == 0:
        return None
    sa, da = tot[0] / tot[1], tot[2] / tot[3]
    return {"SA": sa, "DA": da, "AA": math.sqrt(sa * da), "n_true_static": int(tot[0]), "n_total_static": int(tot[1]), "n_true_dynamic": int(tot[2]), "n_total_dynamic": int(tot[3])}


def stage_eval(cfg: PipelineConfig):
    cid = cfg.central_id
    metrics: dict = {}
    for s in cfg.sessions:
        r = _removal_metrics(cfg, s)
        if r is not None:
            metrics[f"removal.session_{s.id}"] = r
    merged = _merged_poses(cfg)
    gts = {s.id: io.read_tum(s.ground_truth) for s in cfg.sessions if s.ground_truth and os.path.exists(s.ground_truth)}
    errs = []
    for sid, (t, poses) in sorted(merged.items()):
        if sid not in gts:
            continue
        try:
            e = translation_errors(poses, gts[sid][1], t, gts[sid][0], cfg.eval.time_tol)
        except NoAssociations:
            continue
        metrics[f"ate.session_{sid}"] = ate(poses, gts[sid][1], t, gts[sid][0], cfg.eval.time_tol).as_dict()
        errs.append(e)
    if errs:
        # pooled over all sessions; each session is associated against its own ground truth
        metrics["ate.merged"] = error_stats(np.concatenate(errs)).as_dict()
    if cid in gts and os.path.exists(sdir(cfg, cid, "optimized.tum")):
        t, p = io.read_tum(sdir(cfg, cid, "optimized.tum"))
        metrics[f"ate.intra_session_{cid}"] = ate(p, gts[cid][1], t, gts[cid][0], cfg.eval.time_tol).as_dict()
    # place recognition over inter-session descriptor loops
    curve = None
    if cid in merged and cid in gts:
        ct, _ = merged[cid]
        cpos = _gt_positions(ct, gts[cid], cfg.eval.time_tol)
        for sid in sorted(merged):
            p = mdir(cfg, f"loops_inter_{sid}.txt")
            if sid == cid or sid not in gts or not os.path.exists(p):
                continue
            qpos = _gt_positions(merged[sid][0], gts[sid], cfg.eval.time_tol)
            matches = [ScoredMatch(lp.i, lp.j, lp.votes + 0.999 * lp.overlap) for lp in io.read_loops(p)]
            curve = pr_curve(matches, qpos, cfg.eval.d_th, db_positions=cpos)
            _mkdirs(os.path.join(cfg.out_dir, "eval"))
            io.write_pr_csv(os.path.join(cfg.out_dir, "eval", f"pr_{sid}.csv"), curve)
            if curve:
                best = max(curve, key=lambda c: c.f1)
                metrics[f"pr.session_{sid}"] = {"f1_max": best.f1, "precision": best.precision, "recall": best.recall, "threshold": best.threshold}
    # map quality of each query map against the central map
    if cid in merged:
        leaf = cfg.eval.standard_leaf
        central = voxel_downsample(np.concatenate(_merged_static(cfg, cid, merged[cid][1])), leaf)
        for sid in sorted(merged):
            if sid == cid:
                continue
            q = voxel_downsample(np.concatenate(_merged_static(cfg, sid, merged[sid][1])), leaf)
            try:
                mq = map_quality(central, q, cfg.eval.tau, cfg.eval.k_mme, cfg.eval.mme_radius)
            except NoInliers:
                continue
            metrics[f"map.session_{sid}"] = mq.as_dict()
    _mkdirs(os.path.join(cfg.out_dir, "eval"))
    io.write_metrics(os.path.join(cfg.out_dir, "eval", "metrics.txt"), metrics)
    io.write_json(os.path.join(cfg.out_dir, "eval", "metrics.json"), metrics)
    return metrics


def _gt_positions(times, gt, tol):
    gt_t, gt_p = gt
    ei, gi = associate(times, gt_t, tol)
    return {int(i): gt_p[j].translation for i, j in zip(ei, gi)}


RUNNERS = {
    "remove-dynamics": stage_remove,
    "describe": stage_describe,
    "loop-detect": stage_loops,
    "optimize": stage_optimize,
    "merge": stage_merge,
    "diff": stage_diff,
    "eval": stage_eval,
}


def write_manifest(cfg: PipelineConfig, stages):
    os.makedirs(cfg.out_dir, exist_ok=True)
    d = cfg.to_dict()
    # the manifest sits in the output directory, so record it relative to itself
    d["pipeline"]["out_dir"] = "."
    io.write_json(os.path.join(cfg.out_dir, "manifest.json"), {"config": d, "stages": list(stages)})


def run_stage(cfg: PipelineConfig, stage):
    try:
        return RUNNERS[stage](cfg)
    except (ConfigError, io.MalformedFile) as exc:
        raise StageError(stage, exc) from exc
    except (EmptyClass, NoAssociations, NoInliers, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, exc) from exc


def run_pipeline(cfg: PipelineConfig, until=None):
    """Every stage in order, stopping after ``until``; earlier outputs stay on disk if one fails."""
    cfg.validate()
    if not cfg.sessions:
        raise ConfigError("no sessions configured")
    stages = STAGES if until is None else STAGES[: STAGES.index(until) + 1]
    write_manifest(cfg, stages)
    out = {}
    for st in stages:
        out[st] = run_stage(cfg, st)
    return out


# -- argument handling ---------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--stage", choices=STAGES, help="with run: stop after this stage")
    common.add_argument("--central", type=int, help="central session id")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--seed", type=int, help="seed for synthetic data")
    p = argparse.ArgumentParser(prog="dynamerge", description="Dynamic-aware multi-session LiDAR map merging", parents=[common])
    sub = p.add_subparsers(dest="command")
    sub.add_parser("synth", parents=[common], help="write a two-session synthetic dataset and its config")
    for st in STAGES:
        sub.add_parser(st, parents=[common], help=f"run the {st} stage on prior outputs")
    sub.add_parser("run", parents=[common], help="run all stages (or up to --stage)")
    return p


def resolve_config(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
        if not os.path.isabs(cfg.out_dir):
            cfg.out_dir = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(args.config)), cfg.out_dir))
    else:
        cfg = PipelineConfig()
    # flags win over the file
    if args.central is not None:
        cfg.central = args.central
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = args.threads
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd = args.command or "run"
    try:
        cfg = resolve_config(args)
        if cmd == "synth":
            os.makedirs(cfg.out_dir, exist_ok=True)
            cmd_synth(cfg)
            print(f"wrote {os.path.join(cfg.out_dir, 'config.ini')}")
            return 0
        cfg.validate()
        if not cfg.sessions:
            raise ConfigError("no sessions configured (use --config)")
        if cmd == "run":
            run_pipeline(cfg, args.stage)
        else:
            write_manifest(cfg, [cmd])
            run_stage(cfg, cmd)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
