"""Pseudo ground truth from ego poses and tracked oriented boxes.

Box track text format, one box per line::

    # frame id cx cy cz dx dy dz yaw
    1 7 12.0 -3.5 0.8 4.5 1.9 1.6 0.12

Boxes are expressed in the sensor frame of their own sweep; angles in radians.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FlowField, Frame, FrameSequence, RigidTransform, apply_transform, compose
from .errors import FormatError, OutOfSpan, UncoveredForegroundPoint
from .segmenter import Box, label_dynamic_sequence

DEFAULT_STRIDE = 10


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class BoxTrack:
    instance: int
    frames: list
    boxes: list

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError("one box per annotated frame")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("annotated frames must be strictly increasing")
        for b in self.boxes:
            if min(b.dims) <= 0:
                raise ValueError("box dimensions must be positive")

    def at(self, frame: int) -> Box:
        return interpolate_boxes(self, [frame])[frame]

    def subsample(self, stride: int = DEFAULT_STRIDE) -> "BoxTrack":
        """Keep every ``stride``-th annotation plus the last one."""
        keep = list(range(0, len(self.frames), stride))
        if keep[-1] != len(self.frames) - 1:
            keep.append(len(self.frames) - 1)
        return BoxTrack(self.instance, [self.frames[i] for i in keep], [self.boxes[i] for i in keep])


def interpolate_boxes(track: BoxTrack, target_frames) -> dict:
    """Linear interpolation of centers; yaw follows the shorter arc;
    dimensions are held at the earlier annotation's values."""
    fr = np.asarray(track.frames)
    out = {}
    for f in target_frames:
        if f < fr[0] or f > fr[-1]:
            raise OutOfSpan(f"frame {f} outside annotated span [{fr[0]}, {fr[-1]}]")
        j = int(np.searchsorted(fr, f, side="right")) - 1
        if fr[j] == f:
            out[f] = track.boxes[j]
            continue
        a, b = track.boxes[j], track.boxes[j + 1]
        s = (f - fr[j]) / (fr[j + 1] - fr[j])
        c = (1 - s) * np.asarray(a.center, float) + s * np.asarray(b.center, float)
        dyaw = float(wrap_angle(b.yaw - a.yaw))
        out[f] = Box(tuple(c), a.dims, float(wrap_angle(a.yaw + s * dyaw)))
    return out


def box_pair_transform(box_t: Box, box_1: Box) -> RigidTransform:
    """Rigid map taking points in ``box_t`` to their place in ``box_1``."""
    return compose(box_1.pose, box_t.pose.inverse())


def build_pseudo_gt(seq, gt_ego, tracks, *, margin: float = 1e-6, check_coverage: bool = True,
                    keep_background: bool = False):
    """Flow and labels from ego poses and box tracks.

    Background flow is the ego flow; a point inside a track's box in frame
    ``t`` moves by the box-to-box registration into frame 1. Returns
    ``(flow, labels)`` where ``labels`` has per-frame ``foreground``,
    ``dynamic`` and ``instance`` arrays. A point flagged foreground in the
    input frame but inside no box raises :class:`UncoveredForegroundPoint`
    (disable with ``check_coverage=False``). With ``keep_background`` the
    input's background flags are trusted and no box claims those points,
    which keeps ground returns on a box's bottom face in the background.
    """
    first = seq.frames[0].index
    flows, fg_all, inst_all = [], [], []
    for i, frame in enumerate(seq.frames):
        X = frame.points
        inst = np.zeros(len(X), dtype=np.int64)
        claimable = frame.foreground if keep_background else np.ones(len(X), dtype=bool)
        V = apply_transform(gt_ego[i], X) - X if i > 0 else np.zeros_like(X)
        for tr in sorted(tracks, key=lambda t: t.instance):
            if not (tr.frames[0] <= frame.index <= tr.frames[-1]):
                continue
            box_t = tr.at(frame.index)
            sel = box_t.contains(X, margin) & (inst == 0) & claimable
            if not sel.any():
                continue
            inst[sel] = tr.instance
            if i > 0:
                box_1 = tr.at(first)   # raises OutOfSpan when frame 1 is not covered
                V[sel] = apply_transform(box_pair_transform(box_t, box_1), X[sel]) - X[sel]
        if check_coverage:
            bad = np.flatnonzero(frame.foreground & (inst == 0))
            if len(bad):
                raise UncoveredForegroundPoint(frame.index, int(bad[0]))
        flows.append(V)
        fg_all.append(inst > 0)
        inst_all.append(inst)
    flow = FlowField(flows)
    labeled = FrameSequence([Frame(f.points, f.index, fg, None, ins)
                             for f, fg, ins in zip(seq.frames, fg_all, inst_all)], seq.interval)
    dyn = label_dynamic_sequence(labeled, flow, gt_ego)
    return flow, {"foreground": fg_all, "dynamic": dyn, "instance": inst_all}


def object_transforms_from_boxes(tracks, gt_ego, frame_indices) -> dict:
    """Per-instance ``T_k`` (object motion after ego alignment) per frame
    position, derived from box registration."""
    first = frame_indices[0]
    out = {}
    for tr in tracks:
        if not (tr.frames[0] <= first <= tr.frames[-1]):
            continue
        b1 = tr.at(first)
        per = {}
        for i, f in enumerate(frame_indices):
            if tr.frames[0] <= f <= tr.frames[-1]:
                full = box_pair_transform(tr.at(f), b1)
                per[i] = compose(full, gt_ego[i].inverse())
        out[tr.instance] = per
    return out


def box_surface_distance(points, box: Box) -> np.ndarray:
    """Unsigned distance from points to the surface of a box."""
    local = box.pose.inverse().apply(np.asarray(points, dtype=float).reshape(-1, 3))
    half = 0.5 * np.asarray(box.dims, dtype=float)
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


def write_box_tracks(path, tracks) -> None:
    lines = ["# frame id cx cy cz dx dy dz yaw"]
    rows = []
    for tr in tracks:
        for f, b in zip(tr.frames, tr.boxes):
            rows.append((f, tr.instance, b))
    for f, k, b in sorted(rows, key=lambda r: (r[0], r[1])):
        vals = [*b.center, *b.dims, b.yaw]
        lines.append(f"{f} {k} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_box_tracks(path) -> list:
    per = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise FormatError(f"{path}:{n}: expected 9 fields, got {len(parts)}")
        try:
            f, k = int(parts[0]), int(parts[1])
            v = [float(x) for x in parts[2:]]
        except ValueError as e:
            raise FormatError(f"{path}:{n}: {e}") from None
        per.setdefault(k, []).append((f, Box(tuple(v[:3]), tuple(v[3:6]), v[6])))
    tracks = []
    for k in sorted(per):
        rows = sorted(per[k], key=lambda r: r[0])
        tracks.append(BoxTrack(k, [r[0] for r in rows], [r[1] for r in rows]))
    return tracks
