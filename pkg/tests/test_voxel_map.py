import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynamerge.voxel_map import (
    InvalidLeaf,
    VoxelCell,
    VoxelMap,
    classify_plane,
    compute_stats,
    fix_normal_signs,
    neighbor_offsets,
    pack_keys,
    sorted_lookup,
    unpack_keys,
    voxel_indices,
)

coords = st.floats(-500.0, 500.0, allow_nan=False, allow_infinity=False)
clouds = arrays(np.float64, st.tuples(st.integers(1, 200), st.just(3)), elements=coords)


@given(arrays(np.int64, st.tuples(st.integers(0, 50), st.just(3)), elements=st.integers(-(2**20), 2**20 - 1)))
def test_pack_unpack_round_trip(idx):
    assert np.array_equal(unpack_keys(pack_keys(idx)), idx.reshape(-1, 3))


def test_pack_keys_preserves_lexicographic_order():
    idx = np.array([[-1, 5, 2], [-1, 5, 3], [0, -7, 0], [0, 0, -1], [3, -100, 9]])
    keys = pack_keys(idx)
    assert np.all(np.diff(keys) > 0)


def test_pack_keys_overflow():
    with pytest.raises(OverflowError):
        pack_keys([[2**20, 0, 0]])


def test_voxel_index_is_floor():
    pts = np.array([[0.0, -0.0001, 1.99], [2.0, -2.0, -2.0001]])
    assert voxel_indices(pts, 2.0).tolist() == [[0, -1, 0], [1, -1, -2]]
    with pytest.raises(InvalidLeaf):
        voxel_indices(pts, 0.0)


@given(clouds, st.sampled_from([0.2, 0.5, 2.0]))
def test_every_point_lands_in_its_own_voxel(pts, leaf):
    vm = VoxelMap(pts, leaf)
    assert vm.counts.sum() == len(pts)
    assert np.array_equal(vm.indices[vm.point_cell], voxel_indices(pts, leaf))
    for row in range(len(vm)):
        ids = vm.cell_point_ids(row)
        assert np.allclose(vm.centroids[row], pts[ids].mean(axis=0))


@given(clouds)
def test_covariance_matches_direct_formula(pts):
    vm = VoxelMap(pts, 50.0, min_pts=1)
    for row in range(len(vm)):
        p = pts[vm.cell_point_ids(row)]
        d = p - p.mean(axis=0)
        assert np.allclose(vm.covariances[row], d.T @ d / len(p), atol=1e-6)
        assert np.all(np.diff(vm.eigenvalues[row]) <= 1e-9)  # descending


def test_plane_classification_and_normal():
    rng = np.random.default_rng(0)
    plane = np.column_stack([rng.uniform(0, 1.9, 200), rng.uniform(0, 1.9, 200), np.full(200, 0.5)])
    blob = rng.uniform(2.1, 3.9, size=(200, 3))
    vm = VoxelMap(np.vstack([plane, blob]), 2.0)
    r0 = vm.row_of((0, 0, 0))
    r1 = vm.row_of((1, 1, 1))
    assert vm.is_plane[r0] and not vm.is_plane[r1]
    assert np.allclose(vm.normals[r0], [0, 0, 1])
    assert (1, 1, 1) in vm and (5, 5, 5) not in vm
    cell = vm[(0, 0, 0)]
    assert cell.is_plane and cell.count == 200


def test_sparse_cells_get_no_normal():
    vm = VoxelMap(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]), 1.0)
    assert not vm.is_plane[0]
    assert vm.cell(0).normal is None


def test_cell_helpers_agree_with_map():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0, 1, 50), rng.uniform(0, 1, 50), 0.5 + 0.001 * rng.normal(size=50)])
    c = classify_plane(compute_stats(VoxelCell(pts)))
    vm = VoxelMap(pts, 2.0)
    assert c.is_plane == bool(vm.is_plane[0])
    assert np.allclose(c.normal, vm.normals[0])
    with pytest.raises(ValueError):
        compute_stats(VoxelCell(np.zeros((0, 3))))


def test_normal_sign_convention():
    n = fix_normal_signs([[0, 0, -1], [-1, 0, 0], [0, -1, 0], [0.6, 0, 0.8]])
    assert n.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0], [0.6, 0, 0.8]]


def test_neighbor_rows():
    pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [1.5, 1.5, 1.5], [3.5, 0.5, 0.5]])
    vm = VoxelMap(pts, 1.0)
    r = vm.row_of((0, 0, 0))
    nb6 = set(vm.neighbor_rows([r], 6)[0]) - {-1}
    nb26 = set(vm.neighbor_rows([r], 26)[0]) - {-1}
    assert nb6 == {vm.row_of((1, 0, 0))}
    assert nb26 == {vm.row_of((1, 0, 0)), vm.row_of((1, 1, 1))}
    assert len(neighbor_offsets(6)) == 6 and len(neighbor_offsets(26)) == 26


def test_sorted_lookup_misses():
    keys = np.array([1, 5, 9], dtype=np.int64)
    assert sorted_lookup(keys, [0, 1, 9, 10]).tolist() == [-1, 0, 2, -1]
    assert sorted_lookup(np.zeros(0, np.int64), [3]).tolist() == [-1]


def test_rejects_non_finite_points():
    with pytest.raises(ValueError):
        VoxelMap(np.array([[0.0, np.nan, 0.0]]), 1.0)
