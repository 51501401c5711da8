import math

import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynamerge.evaluation import (
    EmptyClass,
    NoAssociations,
    NoInliers,
    ScoredMatch,
    associate,
    ate,
    gaussian_entropy,
    ground_truth_positives,
    map_quality,
    max_f1,
    mean_map_entropy,
    pr_curve,
    recall_at_precision,
    removal_score,
)
from dynamerge.geometry import from_xyz_yaw

seeds = st.integers(0, 2**31 - 1)


@given(seeds)
def test_removal_score_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.random(300) < 0.3
    pred = np.where(rng.random(300) < 0.8, gt, ~gt)
    gt[:2] = [True, False]
    s = removal_score(pred, gt)
    sa, da, aa = oracles.removal_counts(pred, gt)
    assert abs(s.SA - sa) <= 1e-9 and abs(s.DA - da) <= 1e-9 and abs(s.AA - aa) <= 1e-9


def test_removal_score_voxel_groups():
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [5.1, 0, 0], [5.2, 0, 0]])
    gt = np.array([False, False, True, True])
    pred = np.array([True, False, True, False])
    s = removal_score(pred, gt, standard_leaf=1.0, points=pts)
    # static group survives through one point, dynamic group leaks one point
    assert (s.SA, s.DA) == (1.0, 0.0)
    with pytest.raises(EmptyClass):
        removal_score([False], [False])
    with pytest.raises(ValueError):
        removal_score([False, True], [False])


@given(seeds, st.sampled_from([None, 5]))
def test_pr_curve_matches_loop_oracle(seed, gap):
    rng = np.random.default_rng(seed)
    q = {i: rng.uniform(0, 100, 3) for i in range(40)}
    db = None if gap is not None else {j: rng.uniform(0, 100, 3) for j in range(50)}
    pool = range(40) if db is None else range(50)
    matches = [(i, int(rng.choice(list(pool))), float(rng.random())) for i in range(40) if rng.random() < 0.7]
    th = [0.0, 0.25, 0.5, 0.75, 1.1]
    got = pr_curve(matches, q, 30.0, db, gap or 0, th)
    want = oracles.pr_points(matches, q, q if db is None else db, 30.0, th, gap)
    for g, (p, r, f) in zip(got, want):
        assert abs(g.precision - p) <= 1e-9 and abs(g.recall - r) <= 1e-9 and abs(g.f1 - f) <= 1e-9


def test_pr_helpers():
    q = {0: [0, 0, 0], 1: [1, 0, 0], 2: [50, 0, 0]}
    assert ground_truth_positives(q, 2.0, min_gap=0) == [1]
    c = pr_curve([ScoredMatch(1, 0, 0.9), ScoredMatch(2, 0, 0.4)], q, 2.0)
    assert [(p.tp, p.fp) for p in c] == [(1, 1), (1, 0)]
    assert max_f1(c).threshold == 0.9
    assert recall_at_precision(c) == 1.0
    assert pr_curve([], q, 2.0, thresholds=[0.5])[0].precision == 1.0


@given(seeds)
def test_ate_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(int(rng.integers(1, 40)), 3))
    est = gt + rng.normal(scale=0.1, size=gt.shape)
    a = ate(est, gt).as_dict()
    o = oracles.ate_stats(est, gt)
    for k in o:
        assert abs(a[k] - o[k]) <= 1e-9


def test_ate_with_timestamps_and_poses():
    gt = [from_xyz_yaw(i, 0, 0, 0) for i in range(5)]
    est = [from_xyz_yaw(i, 0.1, 0, 0.3) for i in range(5)]
    e, g = associate([0.0, 1.01, 7.0], [0.0, 1.0, 2.0], tol=0.05)
    assert e.tolist() == [0, 1] and g.tolist() == [0, 1]
    s = ate(est, gt, np.arange(5.0) + 0.01, np.arange(5.0))
    assert s.n == 5 and s.rmse == pytest.approx(0.1)
    with pytest.raises(NoAssociations):
        ate(est, gt[:3])
    with pytest.raises(NoAssociations):
        ate(est, gt, np.arange(5.0) + 10, np.arange(5.0))


def test_map_quality_matches_loop_oracle():
    rng = np.random.default_rng(3)
    A = rng.uniform(0, 10, size=(1500, 3))
    B = A[:1200] + rng.normal(scale=0.05, size=(1200, 3))
    B = np.vstack([B, rng.uniform(30, 40, size=(50, 3))])
    q = map_quality(A, B, tau=1.0, mme_radius=1.5)
    ac, cd = oracles.map_quality(A, B, 1.0)
    assert abs(q.ac - ac) <= 1e-9 and abs(q.cd - cd) <= 1e-9
    mme = oracles.mean_map_entropy(np.vstack([A, B]), 1.5, 10)
    assert abs(q.mme - mme) <= 1e-9
    with pytest.raises(NoInliers):
        map_quality(A, A + 100, tau=1.0)


def test_mme_far_from_origin():
    rng = np.random.default_rng(4)
    P = rng.uniform(0, 5, size=(800, 3))
    near = mean_map_entropy(P, 1.0)
    far = mean_map_entropy(P + 1e5, 1.0)
    assert abs(near - far) <= 1e-6
    assert abs(near - oracles.mean_map_entropy(P, 1.0, 10)) <= 1e-9


def test_parallel_planes_chamfer():
    g = np.arange(0, 10, 0.1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    for d in (0.1, 0.3):
        A = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
        B = A + [0, 0, d]
        q = map_quality(A, B, tau=1.0, mme_radius=0.3)
        assert abs(q.cd - 2 * d * d) <= 0.05 * 2 * d * d
        assert q.ac == pytest.approx(d, rel=0.05)


def test_gaussian_entropy_of_identity():
    assert gaussian_entropy(np.eye(3)) == pytest.approx(1.5 * math.log(2 * math.pi * math.e))
    assert np.isnan(gaussian_entropy(np.zeros((3, 3))))
