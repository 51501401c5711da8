import numpy as np
import pytest

from dynamerge import io
from dynamerge.dynastd import GlobalDescriptor
from dynamerge.geometry import from_xyz_yaw, random_pose
from dynamerge.loop_closure import LoopPair


def test_single_record_bin_is_one_point(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(np.array([1.0, 2.0, 3.0, 0.5], dtype="<f4").tobytes())
    assert io.load_bin(p).tolist() == [[1.0, 2.0, 3.0]]


def test_truncated_bin_raises(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 20)
    with pytest.raises(io.MalformedFile) as e:
        io.load_bin(p)
    assert e.value.offset == 16


def test_bin_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(50, 3)).astype(np.float32).astype(float)
    io.write_bin(tmp_path / "a.bin", pts)
    assert np.array_equal(io.load_bin(tmp_path / "a.bin"), pts)


@pytest.mark.parametrize("binary", [False, True])
def test_ply_round_trip(tmp_path, binary):
    pts = np.random.default_rng(1).normal(size=(20, 3))
    io.write_ply(tmp_path / "a.ply", pts, binary=binary)
    assert np.allclose(io.load_ply(tmp_path / "a.ply"), pts, atol=1e-6)
    (tmp_path / "b.ply").write_bytes(b"not a ply")
    with pytest.raises(io.MalformedFile):
        io.load_ply(tmp_path / "b.ply")


def test_labels_and_masks(tmp_path):
    io.write_labels(tmp_path / "l.label", [0, 1, 1, 0])
    lab = io.load_labels(tmp_path / "l.label")
    assert io.dynamic_mask(lab).tolist() == [False, True, True, False]
    sk = np.array([252 | (7 << 16), 40, 259], np.uint32)
    assert io.dynamic_mask(sk, "semantickitti").tolist() == [True, False, True]
    (tmp_path / "t.label").write_bytes(b"\0" * 5)
    with pytest.raises(io.MalformedFile):
        io.load_labels(tmp_path / "t.label")


def test_tum_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    poses = [random_pose(rng) for _ in range(5)]
    io.write_tum(tmp_path / "p.tum", np.arange(5) * 0.1, poses)
    t, back = io.read_tum(tmp_path / "p.tum")
    assert np.allclose(t, np.arange(5) * 0.1)
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-9)


def test_descriptor_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    d = GlobalDescriptor(4, rng.random((3, 3)), rng.random((3, 3)), rng.random((3, 3, 3)), rng.random((3, 3, 3)))
    io.write_descriptors(tmp_path / "d.dstd", [d])
    back = io.read_descriptors(tmp_path / "d.dstd", frame_ids=[4, 9])
    assert [b.frame_id for b in back] == [4, 9] and len(back[1]) == 0
    assert np.array_equal(back[0].vertices, d.vertices) and np.array_equal(back[0].sides, d.sides)
    raw = (tmp_path / "d.dstd").read_bytes()
    with pytest.raises(io.MalformedFile):
        io.descriptors_from_bytes(raw[:-3])
    with pytest.raises(io.MalformedFile):
        io.descriptors_from_bytes(b"XXXX" + raw[4:])


def test_loops_map_metrics_round_trip(tmp_path):
    lp = LoopPair(1, 2, from_xyz_yaw(1, 2, 0, 0.5), "radius", 0, 0.75)
    io.write_loops(tmp_path / "l.txt", [lp])
    (back,) = io.read_loops(tmp_path / "l.txt")
    assert (back.i, back.j, back.kind) == (1, 2, "radius")
    (tmp_path / "bad.txt").write_text("radius 1\n")
    with pytest.raises(io.MalformedFile):
        io.read_loops(tmp_path / "bad.txt")

    io.write_map(tmp_path / "m.bin", np.ones((3, 3)), [0, 1, 1], [0, 0, 1])
    P, s, d = io.read_map(tmp_path / "m.bin")
    assert P.shape == (3, 3) and s.tolist() == [0, 1, 1] and d.tolist() == [0, 0, 1]

    io.write_metrics(tmp_path / "m.txt", {"a": {"b": 1, "c": 0.25}, "ok": True})
    assert io.read_metrics(tmp_path / "m.txt") == {"a.b": 1, "a.c": 0.25, "ok": "true"}
