"""Serialization of frames, poses and flows, plus the sequence bundle
directory layout.

Bundle layout::

    frames/00001.ply ...   one PLY per frame (x, y, z + label properties)
    poses.txt              "t qw qx qy qz tx ty tz", frame t -> frame 1
    boxes.txt              box tracks (see rigid_accum.gt)
    flow/00002.flow ...    ground-truth flow per source frame
    meta.json              interval and free-form metadata
"""
from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FlowField, Frame, FrameSequence, RigidTransform
from .errors import (FormatError, GapInFrames, MalformedHeader, NonUnitQuaternion, SizeMismatch,
                     TruncatedBody, UnsupportedProperty, UnsupportedPropertyWarning)
from .gt import read_box_tracks, write_box_tracks

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_WRITE_TYPES = {"u1": "uchar", "i4": "int", "u4": "uint", "f4": "float", "f8": "double",
                "i1": "char", "i2": "short", "u2": "ushort"}
LABEL_PROPS = ("foreground", "dynamic", "instance", "intensity")
QUAT_TOL = 1e-3


def atomic_write(path, data: bytes) -> None:
    """Write through a temporary file and rename, so readers never see a
    partial file. Existing non-regular targets (devices, pipes) are written
    in place, never replaced."""
    path = Path(path)
    if path.exists() and not path.is_file():
        with open(path, "wb") as fh:
            fh.write(data)
        return
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- PLY

def _frame_columns(frame: Frame) -> dict:
    cols = {
        "foreground": frame.foreground.astype(np.uint8),
        "dynamic": frame.dynamic.astype(np.uint8),
        "instance": frame.instance.astype(np.int32),
    }
    if frame.intensity is not None:
        cols["intensity"] = frame.intensity.astype(np.float32)
    for k, v in frame.extras.items():
        v = np.asarray(v)
        cols[k] = v.astype(np.int32) if v.dtype.kind in "iub" else v.astype(np.float32)
    return cols


def encode_ply(points, columns: dict | None = None, *, binary: bool = True,
               comments=()) -> bytes:
    """Serialize points (stored as float32) plus per-point scalar columns."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    columns = dict(columns or {})
    n = len(pts)
    names = ["x", "y", "z"] + list(columns)
    arrays = [pts[:, 0], pts[:, 1], pts[:, 2]] + [np.asarray(v).reshape(n) for v in columns.values()]
    dtypes = ["f4"] * 3 + [np.asarray(a).dtype.str.lstrip("<>|=") for a in arrays[3:]]
    for d in dtypes:
        if d not in _WRITE_TYPES:
            raise UnsupportedProperty(f"cannot store dtype {d} in PLY")
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    head += [f"property {_WRITE_TYPES[d]} {nm}" for nm, d in zip(names, dtypes)]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        rec = np.empty(n, dtype=[(nm, "<" + d) for nm, d in zip(names, dtypes)])
        for nm, a in zip(names, arrays):
            rec[nm] = a
        return header + rec.tobytes()
    rows = []
    for i in range(n):
        rows.append(" ".join(repr(float(a[i])) if a.dtype.kind == "f" else str(int(a[i]))
                             for a in arrays))
    return header + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


def write_ply(path, frame, *, binary: bool = True) -> None:
    """Write a :class:`Frame` (or a bare ``(n, 3)`` array) to ``path``."""
    if isinstance(frame, Frame):
        data = encode_ply(frame.points, _frame_columns(frame), binary=binary)
    else:
        data = encode_ply(frame, None, binary=binary)
    atomic_write(path, data)


def _parse_header(buf: bytes, path):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise MalformedHeader(f"{path}: not a PLY file or missing end_header")
    nl = buf.find(b"\n", end)
    body_start = len(buf) if nl < 0 else nl + 1
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []    # [name, count, [(name, type or ('list', ct, it))]]
    for raw in lines[1:]:
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise MalformedHeader(f"{path}: bad format line {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedHeader(f"{path}: bad element line {raw!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader(f"{path}: property before any element")
            if len(tok) == 5 and tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            elif len(tok) == 3:
                elements[-1][2].append((tok[2], tok[1]))
            else:
                raise MalformedHeader(f"{path}: bad property line {raw!r}")
        else:
            raise MalformedHeader(f"{path}: unknown header keyword {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"{path}: unsupported format {fmt!r}")
    return fmt, elements, body_start


def _read_binary_element(body, pos, count, props, path, wanted: bool):
    """Decode one binary element; returns (columns, new position)."""
    scalar = all(not isinstance(t, tuple) for _, t in props)
    if scalar:
        for nm, t in props:
            if t not in PLY_TYPES:
                raise UnsupportedProperty(f"{path}: unknown property type {t!r} for {nm!r}")
        dt = np.dtype([(nm, "<" + PLY_TYPES[t]) for nm, t in props])
        need = dt.itemsize * count
        if len(body) - pos < need:
            raise TruncatedBody(f"{path}: expected {count} records, body too short")
        rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
        cols = {nm: rec[nm].copy() for nm, _ in props} if wanted else {}
        return cols, pos + need
    cols = {nm: [] for nm, t in props if not isinstance(t, tuple)}
    for _ in range(count):
        for nm, t in props:
            if isinstance(t, tuple):
                ct, it = PLY_TYPES.get(t[1]), PLY_TYPES.get(t[2])
                if ct is None or it is None:
                    raise UnsupportedProperty(f"{path}: unknown list type in {nm!r}")
                sz = np.dtype(ct).itemsize
                if len(body) - pos < sz:
                    raise TruncatedBody(f"{path}: body ends inside a list property")
                k = int(np.frombuffer(body, "<" + ct, 1, pos)[0])
                pos += sz + k * np.dtype(it).itemsize
                if pos > len(body):
                    raise TruncatedBody(f"{path}: body ends inside a list property")
            else:
                if t not in PLY_TYPES:
                    raise UnsupportedProperty(f"{path}: unknown property type {t!r}")
                d = np.dtype("<" + PLY_TYPES[t])
                if len(body) - pos < d.itemsize:
                    raise TruncatedBody(f"{path}: expected {count} records, body too short")
                cols[nm].append(np.frombuffer(body, d, 1, pos)[0])
                pos += d.itemsize
    out = {nm: np.array(v, dtype=PLY_TYPES[dict(props)[nm]]) for nm, v in cols.items()}
    return (out if wanted else {}), pos


def decode_ply(buf: bytes, path="<bytes>"):
    """Parse PLY bytes; returns ``(points (n,3) float64, columns dict)`` for
    the ``vertex`` element."""
    fmt, elements, start = _parse_header(buf, path)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeader(f"{path}: no vertex element")
    vprops = dict(elements[names.index("vertex")][2])
    for c in "xyz":
        if c not in vprops or isinstance(vprops[c], tuple):
            raise MalformedHeader(f"{path}: vertex element lacks scalar {c!r}")
    cols = None
    if fmt == "ascii":
        lines = [l for l in buf[start:].decode("ascii", errors="replace").splitlines() if l.strip()]
        li = 0
        for name, count, props in elements:
            if li + count > len(lines):
                raise TruncatedBody(f"{path}: element {name!r} declares {count} rows, "
                                    f"{len(lines) - li} remain")
            rows = lines[li:li + count]
            li += count
            if name != "vertex":
                continue
            cols = {nm: [] for nm, t in props if not isinstance(t, tuple) and t in PLY_TYPES}
            for r in rows:
                tok = r.split()
                j = 0
                for nm, t in props:
                    if isinstance(t, tuple):
                        if j >= len(tok):
                            raise TruncatedBody(f"{path}: short row {r!r}")
                        j += 1 + int(float(tok[j]))
                        continue
                    if j >= len(tok):
                        raise TruncatedBody(f"{path}: short row {r!r}")
                    if nm in cols:
                        cols[nm].append(float(tok[j]))
                    j += 1
            cols = {nm: np.array(v, dtype=PLY_TYPES[vprops[nm]]) for nm, v in cols.items()}
    else:
        body = memoryview(buf)[start:]
        pos = 0
        for name, count, props in elements:
            got, pos = _read_binary_element(body, pos, count, props, path, name == "vertex")
            if name == "vertex":
                cols = got
                break
    skipped = [nm for nm, t in vprops.items() if isinstance(t, tuple) or t not in PLY_TYPES]
    for nm in skipped:
        warnings.warn(f"{path}: skipping unsupported vertex property {nm!r}",
                      UnsupportedPropertyWarning, stacklevel=3)
        cols.pop(nm, None)
    pts = np.c_[cols.pop("x"), cols.pop("y"), cols.pop("z")].astype(float)
    return pts, cols


def read_ply(path, index: int = 1) -> Frame:
    """Read a PLY file into a :class:`Frame`; known label properties map to
    frame attributes, any other scalar property lands in ``extras``."""
    pts, cols = decode_ply(Path(path).read_bytes(), path)
    kw = {k: cols.pop(k) for k in LABEL_PROPS if k in cols}
    if "foreground" in kw:
        kw["foreground"] = kw["foreground"] != 0
    if "dynamic" in kw:
        kw["dynamic"] = kw["dynamic"] != 0
    return Frame(pts, index, extras=cols, **kw)


# ---------------------------------------------------------------- poses

def write_poses(path, poses, first: int = 1) -> None:
    lines = ["# t qw qx qy qz tx ty tz"]
    for i, T in enumerate(poses):
        vals = [*T.rotation, *T.translation]
        lines.append(f"{first + i} " + " ".join(repr(float(v)) for v in vals))
    atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_poses(path) -> list:
    """Poses listed by frame index, which must run contiguously from 1.

    Quaternions within 1e-3 of unit norm are renormalized; others are
    rejected.
    """
    rows = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 8:
            raise FormatError(f"{path}:{n}: expected 8 fields, got {len(tok)}")
        try:
            t = int(tok[0])
            v = np.array([float(x) for x in tok[1:]])
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from None
        if t in rows:
            raise FormatError(f"{path}:{n}: duplicate frame {t}")
        q = v[:4]
        nq = np.linalg.norm(q)
        if abs(nq - 1.0) > QUAT_TOL:
            raise NonUnitQuaternion(f"{path}:{n}: quaternion norm {nq:.6f}")
        rows[t] = RigidTransform(q / nq, v[4:])
    idx = sorted(rows)
    if idx != list(range(1, len(idx) + 1)):
        missing = sorted(set(range(1, (idx[-1] if idx else 0) + 1)) - set(idx))
        raise GapInFrames(f"{path}: frames must run 1..T; missing {missing or idx[:1]}")
    return [rows[i] for i in idx]


# ---------------------------------------------------------------- flow

def encode_flow(vectors) -> bytes:
    v = np.asarray(vectors, dtype="<f4").reshape(-1, 3)
    return struct.pack("<I", len(v)) + v.tobytes()


def decode_flow(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 4:
        raise SizeMismatch(f"{path}: missing count header")
    (n,) = struct.unpack_from("<I", buf)
    if len(buf) - 4 != 12 * n:
        raise SizeMismatch(f"{path}: header says {n} vectors, body holds {(len(buf) - 4) / 12:g}")
    return np.frombuffer(buf, dtype="<f4", count=3 * n, offset=4).reshape(n, 3).astype(float)


def write_flow(path, vectors) -> None:
    atomic_write(path, encode_flow(vectors))


def read_flow(path) -> np.ndarray:
    return decode_flow(Path(path).read_bytes(), path)


def write_flow_dir(directory, flow: FlowField, first: int = 1) -> list:
    """One ``.flow`` file per source frame; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(1, len(flow)):
        p = d / f"{first + i:05d}.flow"
        write_flow(p, flow[i])
        out.append(p)
    return out


def read_flow_dir(directory, sizes) -> FlowField:
    """Inverse of :func:`write_flow_dir`; ``sizes`` are the per-frame point
    counts (the target frame gets zero flow)."""
    d = Path(directory)
    vecs = [np.zeros((sizes[0], 3))]
    for i in range(1, len(sizes)):
        p = d / f"{i + 1:05d}.flow"
        v = read_flow(p)
        if len(v) != sizes[i]:
            raise SizeMismatch(f"{p}: {len(v)} vectors for a frame of {sizes[i]} points")
        vecs.append(v)
    return FlowField(vecs)


# ---------------------------------------------------------------- bundle

@dataclass
class SequenceBundle:
    sequence: FrameSequence
    poses: list | None = None
    tracks: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def write_bundle(directory, seq: FrameSequence, poses=None, tracks=(), meta=None) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        write_ply(d / "frames" / f"{f.index:05d}.ply", f)
    if poses is not None:
        write_poses(d / "poses.txt", poses, seq.frames[0].index)
    if tracks:
        write_box_tracks(d / "boxes.txt", tracks)
    if seq.gt_flow is not None:
        write_flow_dir(d / "flow", seq.gt_flow, seq.frames[0].index)
    m = {"interval": seq.interval, "num_frames": len(seq.frames)}
    m.update(meta or {})
    atomic_write(d / "meta.json", json.dumps(m, indent=2, sort_keys=True).encode())
    return d


def read_bundle(directory) -> SequenceBundle:
    d = Path(directory)
    fdir = d / "frames"
    if not fdir.is_dir():
        raise FileNotFoundError(f"{fdir} does not exist")
    files = sorted(fdir.glob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no PLY frames in {fdir}")
    idx = [int(p.stem) for p in files]
    if idx != list(range(1, len(idx) + 1)):
        raise GapInFrames(f"{fdir}: frame files must be numbered 00001..{len(idx):05d}")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    frames = [read_ply(p, i) for p, i in zip(files, idx)]
    gt = None
    if (d / "flow").is_dir():
        gt = read_flow_dir(d / "flow", [len(f) for f in frames])
    seq = FrameSequence(frames, float(meta.get("interval", 0.1)), gt)
    poses = read_poses(d / "poses.txt") if (d / "poses.txt").exists() else None
    tracks = read_box_tracks(d / "boxes.txt") if (d / "boxes.txt").exists() else []
    return SequenceBundle(seq, poses, tracks, meta)
