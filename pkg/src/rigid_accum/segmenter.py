"""Foreground and motion segmentation.

Learned segmentation heads are replaced by oracle labelers and a geometric
residual classifier. Everything downstream consumes
:class:`SegmentationScores`, so a learned provider can be swapped in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import FlowField, RigidTransform, apply_transform

DYNAMIC_SPEED = 0.5       # m/s
SIGMOID_TEMPERATURE = 10.0


@dataclass
class SegmentationScores:
    """Per-frame foreground and dynamic scores in [0, 1].

    Dynamic scores are forced to 0 wherever the foreground score is below
    ``fg_threshold``: background is treated as static.
    """

    foreground: list
    dynamic: list
    fg_threshold: float = 0.5
    dyn_threshold: float = 0.5

    def __post_init__(self):
        fg = [np.clip(np.asarray(f, dtype=float), 0.0, 1.0) for f in self.foreground]
        dyn = [np.clip(np.asarray(d, dtype=float), 0.0, 1.0) for d in self.dynamic]
        for f, d in zip(fg, dyn):
            if f.shape != d.shape:
                raise ValueError("foreground and dynamic scores differ in shape")
            d[f < self.fg_threshold] = 0.0
        self.foreground = fg
        self.dynamic = dyn

    def foreground_mask(self, i):
        return self.foreground[i] >= self.fg_threshold

    def dynamic_mask(self, i):
        # a score exactly at the threshold counts as static
        return self.dynamic[i] > self.dyn_threshold

    @classmethod
    def from_frames(cls, seq) -> "SegmentationScores":
        """Oracle scores from the frames' stored labels."""
        return cls([f.foreground.astype(float) for f in seq.frames],
                   [(f.dynamic & f.foreground).astype(float) for f in seq.frames])


def label_dynamic_oracle(points, gt_flow, ego: RigidTransform, elapsed: float,
                         speed: float = DYNAMIC_SPEED) -> np.ndarray:
    """Dynamic iff the residual motion relative to the background, divided by
    ``elapsed`` seconds, exceeds ``speed`` (strictly)."""
    points = np.asarray(points, dtype=float)
    ego_flow = apply_transform(ego, points) - points
    r = np.linalg.norm(np.asarray(gt_flow, dtype=float) - ego_flow, axis=1)
    return r / elapsed > speed


def label_dynamic_sequence(seq, gt_flow: FlowField, ego, speed: float = DYNAMIC_SPEED):
    """Dynamic labels for every frame of a sequence.

    Source frames use :func:`label_dynamic_oracle`. The target frame has no
    flow of its own; its points inherit "dynamic" from their instance when
    any source-frame point of that instance is dynamic.
    """
    labels = [np.zeros(len(seq.frames[0]), dtype=bool)]
    moving = set()
    for i in range(1, len(seq.frames)):
        f = seq.frames[i]
        lab = label_dynamic_oracle(f.points, gt_flow[i], ego[i], seq.elapsed(i), speed)
        labels.append(lab)
        moving.update(int(k) for k in np.unique(f.instance[lab]) if k != 0)
    inst0 = seq.frames[0].instance
    labels[0] = np.isin(inst0, sorted(moving)) & (inst0 != 0)
    return labels


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def segment_motion_residual(aligned, foreground, elapsed, radius: float = 2.0,
                            threshold: float = DYNAMIC_SPEED,
                            temperature: float = SIGMOID_TEMPERATURE) -> SegmentationScores:
    """Score foreground points by their nearest-neighbour residual velocity.

    ``aligned`` are ego-aligned point arrays (target frame first),
    ``foreground`` boolean masks, ``elapsed`` seconds from each frame to the
    target. Source-frame points are compared against the target frame,
    target-frame points against the second frame. The score is
    ``sigmoid(temperature * (d / elapsed - threshold))``; a point with no
    neighbour within ``radius`` scores 1.
    """
    aligned = [np.asarray(a, dtype=float).reshape(-1, 3) for a in aligned]
    foreground = [np.asarray(m, dtype=bool) for m in foreground]
    trees = {}

    def tree(i):
        if i not in trees:
            trees[i] = cKDTree(aligned[i]) if len(aligned[i]) else None
        return trees[i]

    fg_scores, dyn_scores = [], []
    for i, (pts, fg) in enumerate(zip(aligned, foreground)):
        dyn = np.zeros(len(pts))
        ref = 0 if i > 0 else 1
        dt = elapsed[i] if i > 0 else (elapsed[1] if len(elapsed) > 1 else 0.0)
        q = pts[fg]
        if len(q) and ref < len(aligned) and dt > 0:
            t = tree(ref)
            if t is None:
                dyn[fg] = 1.0
            else:
                d, _ = t.query(q, distance_upper_bound=radius)
                s = _sigmoid(temperature * (np.where(np.isinf(d), 0.0, d) / dt - threshold))
                s[np.isinf(d)] = 1.0
                dyn[fg] = s
        fg_scores.append(fg.astype(float))
        dyn_scores.append(dyn)
    return SegmentationScores(fg_scores, dyn_scores)


@dataclass(frozen=True)
class Box:
    """Yaw-only oriented box; ``center`` is the geometric center."""

    center: tuple
    dims: tuple          # length (x), width (y), height (z)
    yaw: float = 0.0

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform.from_yaw(self.yaw, self.center)

    def corners(self) -> np.ndarray:
        l, w, h = self.dims
        c = np.array([[sx * l, sy * w, sz * h] for sx in (-.5, .5)
                      for sy in (-.5, .5) for sz in (-.5, .5)])
        return self.pose.apply(c)

    def contains(self, points, margin: float = 1e-9) -> np.ndarray:
        local = self.pose.inverse().apply(np.asarray(points, dtype=float).reshape(-1, 3))
        half = 0.5 * np.asarray(self.dims, dtype=float) + margin
        return np.all(np.abs(local) <= half, axis=1)


def segment_foreground_oracle(points, boxes, margin: float = 1e-9) -> np.ndarray:
    """Point-in-oriented-box test; points on a face count as inside."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    inside = np.zeros(len(points), dtype=bool)
    for b in boxes:
        inside |= b.contains(points, margin)
    return inside
