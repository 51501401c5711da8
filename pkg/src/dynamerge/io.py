"""On-disk formats: point clouds, labels, trajectories, descriptors, loop reports, maps, metrics."""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .dynastd import GlobalDescriptor
from .geometry import Pose
from .loop_closure import LoopPair, loop_report_line, parse_loop_report_line


class MalformedFile(ValueError):
    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = int(offset)
        self.reason = reason


# -- clouds --------------------------------------------------------------------


def load_bin(path) -> np.ndarray:
    """KITTI velodyne layout: little-endian float32 x, y, z, intensity per point."""
    raw = open(path, "rb").read()
    if len(raw) % 16:
        raise MalformedFile(path, len(raw) - len(raw) % 16, f"truncated record ({len(raw) % 16} trailing bytes)")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)


def write_bin(path, points, intensity=None):
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros((len(P), 4), dtype="<f4")
    out[:, :3] = P
    if intensity is not None:
        out[:, 3] = np.asarray(intensity, dtype=float).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


def _ply_header(raw, path):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedFile(path, 0, "missing ply header")
    nl = raw.find(b"\n", end)
    body = nl + 1 if nl >= 0 else len(raw)
    fmt, elements = None, []
    for line in raw[:end].decode("ascii", "replace").splitlines()[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MalformedFile(path, 0, "property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], None))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MalformedFile(path, 0, f"unknown property type {parts[1]}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MalformedFile(path, 0, f"unsupported ply format {fmt}")
    return fmt, elements, body


def load_ply(path, fields=("x", "y", "z")) -> np.ndarray:
    """Vertex properties ``fields`` as float columns; ascii and binary bodies."""
    raw = open(path, "rb").read()
    fmt, elements, body = _ply_header(raw, path)
    if not elements or elements[0][0] != "vertex":
        raise MalformedFile(path, body, "first element is not vertex")
    _, n, props = elements[0]
    if any(t is None for _, t in props):
        raise MalformedFile(path, body, "list properties on vertices are not supported")
    names = [p for p, _ in props]
    missing = [f for f in fields if f not in names]
    if missing:
        raise MalformedFile(path, 0, f"vertex lacks {missing}")
    if fmt == "ascii":
        lines = raw[body:].decode("ascii", "replace").split("\n")
        rows = [ln.split() for ln in lines if ln.strip()][:n]
        if len(rows) < n or any(len(r) < len(props) for r in rows):
            raise MalformedFile(path, len(raw), f"expected {n} vertex rows of {len(props)} values")
        try:
            arr = np.array([[float(v) for v in r[: len(props)]] for r in rows]).reshape(n, len(props))
        except ValueError as exc:
            raise MalformedFile(path, body, str(exc)) from exc
        return arr[:, [names.index(f) for f in fields]]
    endian = "<" if fmt == "binary_little_endian" else ">"
    dt = np.dtype([(p, endian + t) for p, t in props])
    need = body + n * dt.itemsize
    if len(raw) < need:
        raise MalformedFile(path, body + (len(raw) - body) // dt.itemsize * dt.itemsize, "truncated vertex data")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=body)
    return np.stack([rec[f].astype(float) for f in fields], axis=1).reshape(n, len(fields))


def write_ply(path, points, binary=False, extra: Dict[str, np.ndarray] = None):
    """x, y, z as float32 (binary) or repr floats (ascii); ``extra`` adds uchar columns."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    extra = extra or {}
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(P)}"]
    head += [f"property {'float' if binary else 'double'} {c}" for c in "xyz"]
    head += [f"property uchar {k}" for k in extra]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + [(k, "u1") for k in extra])
            rec = np.zeros(len(P), dtype=dt)
            for i, c in enumerate("xyz"):
                rec[c] = P[:, i]
            for k, v in extra.items():
                rec[k] = np.asarray(v).reshape(-1)
            fh.write(rec.tobytes())
        else:
            cols = [np.asarray(v).reshape(-1) for v in extra.values()]
            lines = []
            for i, p in enumerate(P):
                vals = [repr(float(c)) for c in p] + [str(int(c[i])) for c in cols]
                lines.append(" ".join(vals))
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def load_cloud(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".bin":
        return load_bin(path)
    if ext == ".ply":
        return load_ply(path)
    raise MalformedFile(path, 0, f"unknown cloud extension {ext!r}")


def write_cloud(path, points):
    if str(path).lower().endswith(".ply"):
        write_ply(path, points, binary=True)
    else:
        write_bin(path, points)


def list_clouds(directory) -> List[str]:
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith((".bin", ".ply")))
    return [os.path.join(directory, f) for f in names]


# -- labels ------------------------------------------------------------------


def load_labels(path) -> np.ndarray:
    """One little-endian uint32 per point."""
    raw = open(path, "rb").read()
    if len(raw) % 4:
        raise MalformedFile(path, len(raw) - len(raw) % 4, "truncated label")
    return np.frombuffer(raw, dtype="<u4").copy()


def write_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(np.asarray(labels).astype("<u4").tobytes())


# SemanticKITTI moving-object classes
MOVING_CLASSES = tuple(range(252, 260))


def dynamic_mask(labels, scheme="binary") -> np.ndarray:
    """``binary``: 1 = dynamic; ``semantickitti``: lower 16 bits in the moving classes."""
    lab = np.asarray(labels, dtype=np.uint32)
    if scheme == "binary":
        return lab == 1
    if scheme == "semantickitti":
        return np.isin(lab & 0xFFFF, MOVING_CLASSES)
    raise ValueError(f"unknown label scheme {scheme!r}")


# -- trajectories --------------------------------------------------------------


def read_tum(path) -> Tuple[np.ndarray, List[Pose]]:
    times, poses = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise MalformedFile(path, 0, f"line {ln}: expected 8 fields, got {len(parts)}")
            try:
                t, x, y, z, qx, qy, qz, qw = map(float, parts)
            except ValueError as exc:
                raise MalformedFile(path, 0, f"line {ln}: {exc}") from exc
            times.append(t)
            poses.append(Pose((qw, qx, qy, qz), (x, y, z)))
    return np.array(times, dtype=float), poses


def tum_line(t, p: Pose) -> str:
    q = p.quat
    x, y, z = p.translation
    return " ".join(f"{v:.9f}" for v in (t, x, y, z, q[1], q[2], q[3], q[0]))


def write_tum(path, times, poses: Sequence[Pose]):
    if len(times) != len(poses):
        raise ValueError("times and poses differ in length")
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p in zip(times, poses):
            fh.write(tum_line(t, p) + "\n")


# -- descriptors ---------------------------------------------------------------

DESCRIPTOR_MAGIC = b"DSTD"
DESCRIPTOR_VERSION = 1
_DESC_REC = np.dtype([("frame", "<u4"), ("attr", "<f8", (6,)), ("v", "<f8", (9,)), ("n", "<f8", (9,))])


def descriptors_to_bytes(descs: Sequence[GlobalDescriptor]) -> bytes:
    """Header (magic, u32 version, u32 count) then one record per triangle."""
    recs = []
    for d in descs:
        r = np.zeros(len(d), dtype=_DESC_REC)
        r["frame"] = d.frame_id
        r["attr"] = np.concatenate([d.sides, d.dots], axis=1) if len(d) else np.zeros((0, 6))
        r["v"] = d.vertices.reshape(-1, 9)
        r["n"] = d.normals.reshape(-1, 9)
        recs.append(r)
    body = np.concatenate(recs) if recs else np.zeros(0, dtype=_DESC_REC)
    return DESCRIPTOR_MAGIC + struct.pack("<II", DESCRIPTOR_VERSION, len(body)) + body.tobytes()


def descriptors_from_bytes(raw: bytes, path="<bytes>", frame_ids=None) -> List[GlobalDescriptor]:
    if raw[:4] != DESCRIPTOR_MAGIC or len(raw) < 12:
        raise MalformedFile(path, 0, "bad descriptor header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DESCRIPTOR_VERSION:
        raise MalformedFile(path, 4, f"unsupported descriptor version {version}")
    need = 12 + count * _DESC_REC.itemsize
    if len(raw) != need:
        have = (len(raw) - 12) // _DESC_REC.itemsize
        raise MalformedFile(path, 12 + min(have, count) * _DESC_REC.itemsize, f"expected {count} records")
    rec = np.frombuffer(raw, dtype=_DESC_REC, count=count, offset=12)
    ids = list(dict.fromkeys(int(f) for f in rec["frame"]))
    for f in frame_ids or ():
        if f not in ids:
            ids.append(int(f))
    out = []
    for f in ids:
        r = rec[rec["frame"] == f]
        out.append(GlobalDescriptor(f, r["attr"][:, :3], r["attr"][:, 3:], r["v"].reshape(-1, 3, 3), r["n"].reshape(-1, 3, 3)))
    return out


def write_descriptors(path, descs: Sequence[GlobalDescriptor]):
    with open(path, "wb") as fh:
        fh.write(descriptors_to_bytes(descs))


def read_descriptors(path, frame_ids=None) -> List[GlobalDescriptor]:
    """Descriptors in file order; ``frame_ids`` adds empty ones for frames without triangles."""
    return descriptors_from_bytes(open(path, "rb").read(), path, frame_ids)


# -- loop reports --------------------------------------------------------------


def write_loops(path, loops: Sequence[LoopPair]):
    with open(path, "w") as fh:
        fh.write("# kind i j tx ty tz qx qy qz qw votes overlap\n")
        for lp in loops:
            fh.write(loop_report_line(lp) + "\n")


def read_loops(path) -> List[LoopPair]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                out.append(parse_loop_report_line(s))
            except ValueError as exc:
                raise MalformedFile(path, 0, f"line {ln}: {exc}") from exc
    return out


# -- merged maps ---------------------------------------------------------------

MAP_RECORD = np.dtype([("xyz", "<f4", (3,)), ("session", "u1"), ("dynamic", "u1")])


def map_to_bytes(points, session_ids, dynamic=None) -> bytes:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros(len(P), dtype=MAP_RECORD)
    rec["xyz"] = P
    rec["session"] = np.asarray(session_ids).reshape(-1)
    if dynamic is not None:
        rec["dynamic"] = np.asarray(dynamic).reshape(-1)
    return rec.tobytes()


def write_map(path, points, session_ids, dynamic=None):
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(points, session_ids, dynamic))


def read_map(path):
    """(points float64, session ids uint8, dynamic flags uint8)."""
    raw = open(path, "rb").read()
    if len(raw) % MAP_RECORD.itemsize:
        raise MalformedFile(path, len(raw) - len(raw) % MAP_RECORD.itemsize, "truncated map record")
    rec = np.frombuffer(raw, dtype=MAP_RECORD)
    return rec["xyz"].astype(float), rec["session"].copy(), rec["dynamic"].copy()


# -- metrics -----------------------------------------------------------------


def _flat(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        else:
            out[key] = v
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics(path, metrics: dict):
    """Flat ``key = value`` lines with nested keys joined by dots."""
    flat = _flat(metrics)
    with open(path, "w") as fh:
        for k in flat:
            fh.write(f"{k} = {_fmt(flat[k])}\n")


def read_metrics(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise MalformedFile(path, 0, f"line {ln}: missing '='")
            k, v = (x.strip() for x in s.split("=", 1))
            for cast in (int, float):
                try:
                    v = cast(v)
                    break
                except ValueError:
                    pass
            out[k] = v
    return out


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pr_csv(path, curve):
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for p in curve:
            fh.write(f"{p.threshold!r},{p.precision!r},{p.recall!r}\n")


def read_pr_csv(path):
    rows = []
    with open(path) as fh:
        head = fh.readline().strip()
        if head != "threshold,precision,recall":
            raise MalformedFile(path, 0, "unexpected csv header")
        for line in fh:
            if line.strip():
                rows.append(tuple(float(v) for v in line.split(",")))
    return rows
