"""End-to-end acceptance checks; ``pytest -m criterion`` prints one pass/fail line per criterion."""

import filecmp
import math
import os

import numpy as np
import oracles
import pytest
import scenarios

from dynamerge import synth
from dynamerge.cli import main as cli_main
from dynamerge.dynamic_removal import update_dynamic_states
from dynamerge.dynastd import (
    DescriptorConfig,
    DescriptorHashTable,
    GlobalDescriptor,
    canonical_triangles,
    describe,
    describe_segmented,
    hash_keys,
    multiset_keys,
    transform_descriptor,
)
from dynamerge.evaluation import ate, map_quality, pr_curve, removal_score
from dynamerge.geometry import Pose, exp_map, from_xyz_yaw, random_pose, relative, rotation_angle
from dynamerge.loop_closure import LoopConfig, LoopPair, detect, estimate_loop_pose, is_ambiguous
from dynamerge.pose_graph import AnchoredBetweenFactor, BetweenFactor, PriorFactor, optimize_intra
from dynamerge.registration import UnifiedMap, brute_force_nearest, map_diff

slow = pytest.mark.slow


# -- 1 -------------------------------------------------------------------------


@slow
@pytest.mark.criterion(1)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_removal_accuracy_and_runtime(seed, criterion):
    clouds, labels, segs, secs = scenarios.removal_run(seed)
    pred = np.concatenate([s.dynamic for s in segs])
    gt = np.concatenate(labels) == synth.DYNAMIC
    sc = removal_score(pred, gt)
    ms = 1000 * float(np.mean(secs))
    pts = float(np.mean([len(c) for c in clouds]))
    criterion(f"seed {seed}: {len(clouds)} keyframes of {pts:.0f} pts, SA {sc.SA:.4f} DA {sc.DA:.4f}, {ms:.1f} ms/keyframe")
    assert len(clouds) == 60
    assert sc.SA >= 0.97
    assert sc.DA >= 0.85
    assert ms < 50.0


# -- 2 -------------------------------------------------------------------------


def _column_measurement(iz_obstacle):
    from dynamerge.dynamic_removal import estimate_free_space

    pts = np.array([[0.1, 0.1, 0.1], [0.1, 0.1, (iz_obstacle + 0.5) * 0.2]])
    return estimate_free_space(pts, np.array([True, False]), 0.2, ceiling=10)


@pytest.mark.criterion(2)
def test_bayes_filter_examples(criterion):
    from dynamerge.dynamic_removal import DynamicStateMap
    from dynamerge.voxel_map import pack_keys

    cell = pack_keys([[0, 0, 3]])
    free, occ, blind = _column_measurement(5), _column_measurement(3), _column_measurement(2)
    p_one = float(update_dynamic_states(None, [free], cell).probability(cell)[0])
    p_bal = float(update_dynamic_states(None, [free, occ], cell).probability(cell)[0])
    # cell 3 sits above the obstacle at 2: not seen by that measurement
    p_unseen = float(update_dynamic_states(None, [free, blind], cell).probability(cell)[0])
    prior = DynamicStateMap(cell, np.array([0.8]))
    kept = float(update_dynamic_states(prior, [free], pack_keys([[0, 0, 4]])).lookup(cell)[0])
    criterion(f"one free hit {p_one!r}, balanced {p_bal!r}, free then unobserved {p_unseen!r}, untouched cell {kept!r}")
    assert abs(p_one - 0.7) <= 1e-12
    assert abs(p_bal - 0.5) <= 1e-12
    assert abs(p_unseen - p_one) <= 1e-12
    assert abs(kept - 0.8) <= 1e-12


# -- 3 -------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_triangle_pose_is_exact(criterion):
    rng = np.random.default_rng(3)
    worst_r = worst_t = 0.0
    dets = []
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        while True:
            V = rng.uniform(-20, 20, size=(n, 3, 3))
            s, _, V, _ = canonical_triangles(V, np.tile(np.eye(3), (n, 1, 1)))
            # triangles with near-equal sides have no stable vertex order and are refused by design
            if not is_ambiguous(s).all():
                break
        T = random_pose(rng, 3.14, 50.0)
        got = estimate_loop_pose(V, T.apply(V.reshape(-1, 3)).reshape(-1, 3, 3), s)
        e = relative(got, T)
        worst_r = max(worst_r, rotation_angle(e))
        worst_t = max(worst_t, float(np.linalg.norm(got.translation - T.translation)))
        dets.append(np.linalg.det(got.rotation))
    criterion(f"1000 trials: max rotation error {worst_r:.2e} rad, max translation error {worst_t:.2e} m")
    assert worst_r < 1e-9 and worst_t < 1e-9
    assert np.allclose(dets, 1.0, atol=1e-12)


# -- 4 -------------------------------------------------------------------------


def _near_edge(sides, dots, margin, side_res=0.2, dot_res=0.1):
    """Triangles with any attribute within ``margin`` bins of a quantization edge."""
    fs = np.asarray(sides) / side_res
    fd = (np.clip(dots, -1, 1) + 1.0) / dot_res
    near_s = np.abs(fs - np.round(fs)) < margin
    # dot = -1 and dot = 1 are clipped into the outer bins, so they are not edges
    near_d = (np.abs(fd - np.round(fd)) < margin) & (fd > margin) & (fd < 2 / dot_res - margin)
    return near_s.any(1) | near_d.any(1)


@slow
@pytest.mark.criterion(4)
def test_descriptor_rigid_invariance(criterion):
    sess = scenarios.street_drive(0)
    pts, _ = scenarios.keyframe(sess, 20)
    d = describe(pts).descriptor
    rng = np.random.default_rng(4)
    base = hash_keys(d.sides, d.dots)
    same = total = excluded = 0
    margin = 1e-6
    for _ in range(500):
        g = transform_descriptor(d, random_pose(rng, math.pi, 100.0))
        # canonical order is recomputed, so compare triangle by triangle in stored order
        edge = _near_edge(d.sides, d.dots, margin) | _near_edge(g.sides, g.dots, margin)
        k = hash_keys(g.sides, g.dots)
        same += int(np.count_nonzero((k == base) & ~edge))
        total += int(np.count_nonzero(~edge))
        excluded += int(np.count_nonzero(edge))
    frac = same / total
    # the voxel grid is part of the description, so whole-pipeline invariance holds for grid-preserving motion
    grid_ok = 0
    for q in range(4):
        for shift in ((0, 0), (2, -4), (-6, 8)):
            T = from_xyz_yaw(2.0 * shift[0], 2.0 * shift[1], 0.0, q * math.pi / 2)
            grid_ok += np.array_equal(multiset_keys(describe(T.apply(pts)).descriptor), multiset_keys(d))
    criterion(f"{len(d)} triangles x 500 transforms: {frac:.4%} identical keys ({excluded} near-edge excluded); grid-preserving motions exact {grid_ok}/12")
    assert frac >= 0.99
    assert grid_ok == 12


@slow
@pytest.mark.criterion(4)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_descriptor_dynamic_ab(seed, criterion):
    from dynamerge.dynamic_removal import DynamicRemover

    clouds, labels, segs, _ = scenarios.removal_run(seed)
    static_rem = DynamicRemover()
    cfg = DescriptorConfig()
    equal = 0
    for k, (pts, lab, seg) in enumerate(zip(clouds, labels, segs)):
        ka = multiset_keys(describe_segmented(seg, cfg).descriptor)
        kb = multiset_keys(describe_segmented(static_rem.process(pts[lab != synth.DYNAMIC], k), cfg).descriptor)
        equal += len(ka) == len(kb) and np.array_equal(ka, kb)
    frac = equal / len(clouds)
    criterion(f"seed {seed}: {equal}/{len(clouds)} keyframes with identical triangle multisets ({frac:.3f})")
    assert frac >= 0.95


# -- 5 -------------------------------------------------------------------------


def _revisit_detections(A, B):
    table = DescriptorHashTable()
    planes = {}
    for k in A.keyframes:
        table.insert(k.descriptor)
        planes[k.index] = k.planes
    out = []
    for k in B.keyframes:
        d = GlobalDescriptor(10000 + k.index, k.descriptor.sides, k.descriptor.dots, k.descriptor.vertices, k.descriptor.normals)
        pl = dict(planes)
        pl[d.frame_id] = k.planes
        lp = detect(d, table, pl, LoopConfig(), allowed=lambda f: True, kind="inter")
        if lp is None:
            out.append(None)
            continue
        e = relative(relative(A.keyframes[lp.j].pose, k.pose), lp.T_ij)
        out.append((lp.j, float(np.linalg.norm(e.translation)), math.degrees(rotation_angle(e))))
    return out


def _good(r):
    return r is not None and r[1] < 0.5 and r[2] < 2.0


@slow
@pytest.mark.criterion(5)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotated_narrow_revisit(seed, criterion):
    A, B = scenarios.revisit(seed)
    res = _revisit_detections(A, B)
    hits = [r for r in res if r is not None]
    ok = sum(map(_good, hits))
    worst = max(hits, key=lambda r: (r[1], r[2])) if hits else None
    criterion(f"seed {seed}: {len(hits)}/{len(res)} queries detected, {ok} within 0.5 m / 2 deg; worst {worst}")
    assert hits and ok == len(hits)
    # every revisit keyframe has a true place in the database; require a working recall too
    assert len(hits) >= 0.3 * len(res)


@slow
@pytest.mark.criterion(5)
def test_revisit_degrades_without_removal(criterion):
    on = _revisit_detections(*scenarios.revisit(0, n_walkers=12, use_removal=True))
    off = _revisit_detections(*scenarios.revisit(0, n_walkers=12, use_removal=False))
    worse = [k for k, (a, b) in enumerate(zip(on, off)) if _good(a) and (not _good(b) or b[1] > 2 * a[1] or b[2] > 2 * a[2])]
    rows = ", ".join(f"q{k}: on {on[k][1]:.3f} m/{on[k][2]:.2f} deg, off {off[k] if off[k] is None else f'{off[k][1]:.3f} m/{off[k][2]:.2f} deg'}" for k in worse[:3])
    criterion(f"12 walkers: {sum(map(_good, on))} good with removal, {sum(map(_good, off))} without; degraded queries {len(worse)} ({rows})")
    assert len(worse) >= 1


# -- 6 -------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_square_loop_drift_and_false_loop(criterion):
    gt = synth.square_loop(10.0, 1.0)
    dr = synth.apply_drift(gt, synth.DriftModel(trans_scale=0.01, yaw_per_step=math.radians(0.2)))
    n = len(gt) - 1

    def end(P):
        return float(np.linalg.norm(P[-1].translation - gt[-1].translation))

    true_loop = LoopPair(n, 0, relative(gt[0], gt[n]), "intra", 10, 1.0)
    clean = optimize_intra(dr, [true_loop])
    ate_clean = ate(clean, gt).mean
    ratios = []
    i, j = int(n * 0.6), int(n * 0.1)
    for off in ([10.0, 0, 0], [0, 10.0, 0], [0, 0, 10.0]):
        Tt = relative(gt[j], gt[i])
        false = LoopPair(i, j, Pose(Tt.quat, Tt.translation + np.array(off)), "intra", 10, 1.0)
        bad = optimize_intra(dr, [true_loop, false])
        ratios.append(ate(bad, gt).mean / ate_clean)
    criterion(f"endpoint {end(dr):.3f} -> {end(clean):.4f} m (ratio {end(clean) / end(dr):.3f}); false-loop ATE ratios {np.round(ratios, 3).tolist()}")
    assert end(clean) <= 0.1 * end(dr)
    assert max(ratios) <= 2.0


# -- 7 -------------------------------------------------------------------------


@slow
@pytest.mark.criterion(7)
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_two_session_merge(seed, criterion):
    res, gt = scenarios.two_session_merge(seed)
    assert res.phase1 is not None and res.phase2 is not None, "a session was left unaligned"

    def mean_ate(m):
        est = list(m.poses[0]) + list(m.poses[1])
        return ate(est, gt).mean

    a1, a2 = mean_ate(res.phase1), mean_ate(res.phase2)
    criterion(f"seed {seed}: {len(res.inter_loops)} descriptor loops, {len(res.radius_loops)} radius pairs; ATE phase 1 {a1:.4f} m, phase 2 {a2:.4f} m")
    assert a2 < 0.05
    assert a2 <= a1


@pytest.mark.criterion(7)
def test_residual_jacobians(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        v = {k: random_pose(rng) for k in ("a", "b", "c", "d")}
        z = lambda T: T @ exp_map(rng.normal(scale=0.3, size=6))  # noqa: E731
        factors = [
            BetweenFactor("a", "b", z(relative(v["a"], v["b"]))),
            PriorFactor("a", z(v["a"])),
            AnchoredBetweenFactor("a", "b", "c", "d", z(relative(v["a"] @ v["b"], v["c"] @ v["d"]))),
        ]
        for f in factors:
            _, Js = f.linearize(v)
            for J, N in zip(Js, oracles.numeric_jacobians(f, v)):
                worst = max(worst, oracles.relative_error(J, N))
    criterion(f"300 factors: worst relative Jacobian error {worst:.2e}")
    assert worst < 1e-5


# -- 8 -------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_metric_oracles(criterion):
    rng = np.random.default_rng(8)
    gt = rng.random(5000) < 0.2
    pred = np.where(rng.random(5000) < 0.9, gt, ~gt)
    s = removal_score(pred, gt)
    err = [abs(a - b) for a, b in zip((s.SA, s.DA, s.AA), oracles.removal_counts(pred, gt))]

    q = {i: rng.uniform(0, 300, 3) for i in range(1000)}
    db = {j: rng.uniform(0, 300, 3) for j in range(1000)}
    matches = [(i, int(rng.integers(0, 1000)), float(rng.random())) for i in range(1000)]
    th = list(np.linspace(0, 1, 21))
    for g, o in zip(pr_curve(matches, q, 35.0, db, thresholds=th), oracles.pr_points(matches, q, db, 35.0, th)):
        err += [abs(g.precision - o[0]), abs(g.recall - o[1]), abs(g.f1 - o[2])]

    G = rng.normal(scale=50, size=(5000, 3))
    E = G + rng.normal(scale=0.2, size=G.shape)
    a, o = ate(E, G).as_dict(), oracles.ate_stats(E, G)
    err += [abs(a[k] - o[k]) for k in o]

    A = rng.uniform(0, 20, size=(2500, 3))
    B = np.vstack([A[:2000] + rng.normal(scale=0.05, size=(2000, 3)), rng.uniform(50, 60, size=(500, 3))])
    mq = map_quality(A, B, tau=1.0, mme_radius=2.0)
    ac, cd = oracles.map_quality(A, B, 1.0)
    mme = oracles.mean_map_entropy(np.vstack([A, B]), 2.0, 10)
    err += [abs(mq.ac - ac), abs(mq.cd - cd), abs(mq.mme - mme)]

    g = np.arange(0, 10, 0.1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    plane = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    cd_rel = []
    for d in (0.05, 0.1, 0.3):
        cd_rel.append(abs(map_quality(plane, plane + [0, 0, d], tau=1.0, mme_radius=0.3).cd - 2 * d * d) / (2 * d * d))
    criterion(f"worst oracle difference {max(err):.2e}; parallel-plane CD relative errors {np.round(cd_rel, 4).tolist()}")
    assert max(err) <= 1e-9
    assert max(cd_rel) <= 0.05


# -- 9 -------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_unified_nearest_is_exact(criterion):
    rng = np.random.default_rng(9)
    P = rng.uniform(-30, 30, size=(20000, 3))
    # lattice points and duplicates create exact distance ties
    g = np.arange(-3, 4, 1.0)
    L = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    P = np.vstack([P, L, L[:50]])
    ties = np.vstack([L[:-1] + 0.5, L])
    Q = np.vstack([ties, rng.uniform(-35, 35, size=(10000 - len(ties), 3))])
    d, i = UnifiedMap(P, 0.5).nearest(Q)
    bd, bi = brute_force_nearest(P, Q)
    n_same = int(np.count_nonzero((i == bi) & (d == bd)))
    criterion(f"{n_same}/{len(Q)} queries identical to brute force")
    assert n_same == len(Q)


@pytest.mark.criterion(9)
def test_map_diff_scenario(criterion):
    rng = np.random.default_rng(10)
    world = synth.street_world(0, n_walkers=0)
    static = np.vstack([scenarios.box_faces(lo, hi, 0.25, rng) for lo, hi in zip(world.lo, world.hi)])
    static2 = np.vstack([scenarios.box_faces(lo, hi, 0.25, rng) for lo, hi in zip(world.lo, world.hi)])
    # parked vans in the middle of the road, away from everything static
    removed = np.vstack([scenarios.box_faces((x, -1.0, 0.0), (x + 4.5, 1.0, 2.0), 0.25, rng) for x in (10, 40)])
    added = np.vstack([scenarios.box_faces((x, -1.0, 0.0), (x + 4.5, 1.0, 2.0), 0.25, rng) for x in (25, 70, 95)])
    prior = UnifiedMap(np.vstack([static, removed]))
    cur = UnifiedMap(np.vstack([static2 + rng.normal(scale=0.02, size=static2.shape), added]))
    got_add, got_rem = map_diff(prior, cur, 0.5)

    def rows(A):
        return {tuple(r) for r in np.round(A, 9)}

    ta, tr = rows(cur.points[len(static2) :]), rows(removed)
    ga, gr = rows(got_add), rows(got_rem)
    recovered = (len(ga & ta) + len(gr & tr)) / (len(ta) + len(tr))
    false = (len(ga - ta) + len(gr - tr)) / (len(static) + len(static2))
    criterion(f"recovered {recovered:.4f} of {len(ta) + len(tr)} changed points, false change {false:.5f}")
    assert recovered >= 0.99
    assert false <= 0.01


# -- 10 ------------------------------------------------------------------------


def _tree_files(root):
    out = []
    for d, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(d, f), root) for f in files]
    return sorted(out)


@slow
@pytest.mark.criterion(10)
def test_pipeline_is_deterministic_across_threads(tmp_path, criterion):
    (tmp_path / "ref.ini").write_text("[synth]\nframes = 300\nquery_start = 22.0\n")
    assert cli_main(["synth", "--config", str(tmp_path / "ref.ini"), "--out-dir", str(tmp_path / "data")]) == 0
    cfg = str(tmp_path / "data" / "config.ini")
    for n in (1, 8):
        assert cli_main(["run", "--config", cfg, "--out-dir", str(tmp_path / f"t{n}"), "--threads", str(n)]) == 0
    fa, fb = _tree_files(tmp_path / "t1"), _tree_files(tmp_path / "t8")
    differ = [f for f in fa if not filecmp.cmp(tmp_path / "t1" / f, tmp_path / "t8" / f, shallow=False)] if fa == fb else ["<file lists differ>"]
    merged = [f for f in fa if f.startswith("merged")]
    criterion(f"{len(fa)} artifacts compared ({len(merged)} merge outputs), {len(differ)} differ")
    assert fa == fb and not differ
    assert "merged/map.bin" in fa and "eval/metrics.txt" in fa
