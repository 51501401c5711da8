import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynamerge.geometry import (
    DegenerateCorrespondences,
    NotOrthonormal,
    Pose,
    adjoint,
    compose,
    exp_map,
    from_xyz_yaw,
    log_map,
    matrix_to_quat,
    quat_to_matrix,
    random_pose,
    relative,
    rotation_angle,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    so3_exp,
    so3_left_jacobian,
    so3_log,
    svd_align,
    yaw_of,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
twist = st.lists(finite, min_size=6, max_size=6).map(np.array)
# keep the rotation part below pi so log is the inverse of exp
small_twist = twist.filter(lambda x: np.linalg.norm(x[:3]) < math.pi - 1e-3)
seeds = st.integers(0, 2**31 - 1)


def pose_from(seed):
    return random_pose(np.random.default_rng(seed))


def close(a: Pose, b: Pose, tol=1e-9):
    return np.allclose(a.matrix(), b.matrix(), atol=tol)


@given(small_twist)
def test_log_inverts_exp(xi):
    assert np.allclose(log_map(exp_map(xi)), xi, atol=1e-9)


@given(seeds)
def test_exp_inverts_log(seed):
    T = pose_from(seed)
    assert close(exp_map(log_map(T)), T)


@given(seeds, seeds, seeds)
def test_composition_is_associative(a, b, c):
    A, B, C = pose_from(a), pose_from(b), pose_from(c)
    assert close((A @ B) @ C, A @ (B @ C))


@given(seeds)
def test_inverse_gives_identity(seed):
    T = pose_from(seed)
    assert close(T @ T.inverse(), Pose())
    assert close(T.inverse() @ T, Pose())


@given(seeds, seeds)
def test_relative_maps_b_frame_into_a_frame(a, b):
    A, B = pose_from(a), pose_from(b)
    p = np.array([0.3, -1.2, 2.0])
    assert np.allclose(relative(A, B).apply(p), A.inverse().apply(B.apply(p)))


@given(seeds, small_twist)
def test_adjoint_moves_twists_across_a_pose(seed, xi):
    T = pose_from(seed)
    assert close(T @ exp_map(xi) @ T.inverse(), exp_map(adjoint(T) @ xi), 1e-8)


@given(small_twist)
def test_se3_left_jacobian_inverse(xi):
    assert np.allclose(se3_left_jacobian(xi) @ se3_left_jacobian_inv(xi), np.eye(6), atol=1e-9)


@pytest.mark.parametrize("scale", [1e-9, 1e-4, 0.05, 0.5, 2.5])
def test_left_jacobian_matches_finite_differences(scale):
    rng = np.random.default_rng(int(scale * 1e9) % 1000)
    xi = rng.normal(size=6)
    xi[:3] *= scale / np.linalg.norm(xi[:3])
    J = se3_left_jacobian(xi)
    h = 1e-6
    num = np.zeros((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        # exp(xi + d) ~= exp(J d) exp(xi)
        num[:, k] = log_map(exp_map(xi + d) @ exp_map(xi).inverse()) / h
    assert np.allclose(num, J, atol=1e-5)


def test_so3_small_angle_branches_agree():
    w = np.array([1e-7, -2e-7, 3e-7])
    R = so3_exp(w)
    assert np.allclose(so3_log(R), w, atol=1e-15)
    assert np.allclose(so3_left_jacobian(w), np.eye(3), atol=1e-6)


def test_log_near_pi():
    w = np.array([0.0, 0.0, math.pi - 1e-9])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-6)


@given(seeds)
def test_quaternion_matrix_round_trip(seed):
    q = pose_from(seed).quat
    q2 = matrix_to_quat(quat_to_matrix(q))
    assert np.allclose(q2, q, atol=1e-12) or np.allclose(q2, -q, atol=1e-12)


def test_pose_normalizes_quaternions_and_is_immutable():
    T = Pose((2.0, 0.0, 0.0, 0.0), (1, 2, 3))
    assert np.allclose(T.quat, [1, 0, 0, 0])
    with pytest.raises(AttributeError):
        T.foo = 1


def test_from_rt_rejects_reflection():
    with pytest.raises(NotOrthonormal):
        Pose.from_rt(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(NotOrthonormal):
        Pose.from_rt(np.eye(3) * 1.01, np.zeros(3))


def test_yaw_helpers():
    T = from_xyz_yaw(1, 2, 3, 0.7)
    assert yaw_of(T) == pytest.approx(0.7)
    assert rotation_angle(T) == pytest.approx(0.7)
    assert np.allclose(T.translation, [1, 2, 3])


def test_compose_function_equals_operator():
    A, B = pose_from(1), pose_from(2)
    assert close(compose(A, B), A @ B)


@given(seeds, st.integers(3, 40))
def test_svd_align_recovers_transform_and_never_reflects(seed, n):
    rng = np.random.default_rng(seed)
    T = random_pose(rng)
    src = rng.normal(scale=5.0, size=(n, 3))
    got = svd_align(src, T.apply(src))
    assert np.linalg.det(got.rotation) > 0
    assert close(got, T, 1e-7)


def test_svd_align_on_mirrored_data_still_returns_rotation():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(20, 3))
    dst = src * np.array([1.0, 1.0, -1.0])
    assert np.linalg.det(svd_align(src, dst).rotation) == pytest.approx(1.0)


def test_svd_align_rejects_degenerate_input():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateCorrespondences):
        svd_align(line, line)
    with pytest.raises(DegenerateCorrespondences):
        svd_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        svd_align(np.zeros((4, 3)), np.zeros((3, 3)))


@given(st.lists(finite, min_size=3, max_size=3).map(np.array).filter(lambda w: np.linalg.norm(w) < math.pi - 1e-4))
def test_so3_log_inverts_exp(w):
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-8)
