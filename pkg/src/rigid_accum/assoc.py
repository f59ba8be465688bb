"""Spatio-temporal instance association.

Dynamic points from all frames are ego-aligned, pushed along their offset
vectors toward their instance centroid, voxel-downsampled and clustered with
DBSCAN. Labels go back to full resolution through voxel membership. A
constant-velocity Kalman tracker over per-frame clusters is the baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import MissingCentroid

VOXEL = 0.15
EPS = 0.75
MIN_PTS = 5


@dataclass
class InstanceLabeling:
    """Per-frame instance ids; 0 means unassigned / noise, others are 1..K."""

    labels: list
    n_clusters: int = 0

    def __post_init__(self):
        self.labels = [np.asarray(l, dtype=np.int64) for l in self.labels]
        ids = np.unique(np.concatenate(self.labels)) if self.labels else np.zeros(0)
        ids = ids[ids != 0]
        if len(ids) and not np.array_equal(ids, np.arange(1, len(ids) + 1)):
            raise ValueError("instance ids must form a contiguous range 1..K")
        self.n_clusters = int(len(ids))

    @classmethod
    def relabel(cls, labels) -> "InstanceLabeling":
        """Map arbitrary ids (0 kept as noise) to 1..K in order of first
        appearance across frames."""
        order = {}
        out = []
        for lab in labels:
            lab = np.asarray(lab, dtype=np.int64)
            new = np.zeros(len(lab), dtype=np.int64)
            for v in lab:
                if v != 0 and v not in order:
                    order[v] = len(order) + 1
            for v, k in order.items():
                new[lab == v] = k
            out.append(new)
        return cls(out)


def voxel_downsample(points, voxel: float = VOXEL):
    """Centroid per occupied voxel.

    Returns ``(representatives, inverse, counts)`` where ``inverse[i]`` is the
    voxel of point ``i``. Voxels are ordered lexicographically by integer key.
    """
    if not voxel > 0:
        raise ValueError("voxel must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    reps = np.zeros((len(counts), 3))
    np.add.at(reps, inverse, points)
    reps /= counts[:, None]
    return reps, inverse, counts


def compute_gt_offsets(points, instance, centroids: dict) -> np.ndarray:
    """``o_k - x`` for labeled points, zero for points with instance 0."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    instance = np.asarray(instance)
    out = np.zeros_like(points)
    for k in np.unique(instance):
        if k == 0:
            continue
        if int(k) not in centroids:
            raise MissingCentroid(int(k))
        sel = instance == k
        out[sel] = np.asarray(centroids[int(k)], dtype=float) - points[sel]
    return out


def dbscan(points, eps: float = EPS, min_pts: int = MIN_PTS, weights=None) -> np.ndarray:
    """DBSCAN labels with noise as 0 and clusters numbered 1..K.

    ``weights`` count each sample as that many points when testing the
    core-point density, which keeps voxel-downsampled clouds equivalent to
    the full-resolution ones.
    """
    if not eps > 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    lab = DBSCAN(eps=eps, min_samples=min_pts).fit(points, sample_weight=weights).labels_
    # sklearn treats the boundary as inclusive (<= eps), as in the original algorithm
    return lab.astype(np.int64) + 1


def cluster_spatiotemporal(points, offsets=None, eps: float = EPS, min_pts: int = MIN_PTS,
                           voxel: float | None = VOXEL) -> InstanceLabeling:
    """Cluster the deformed, pooled point set ``x + delta`` of all frames.

    ``points`` and ``offsets`` are per-frame arrays of ego-aligned dynamic
    points. With ``voxel=None`` the deformed points are clustered directly.
    """
    points = [np.asarray(p, dtype=float).reshape(-1, 3) for p in points]
    if offsets is None:
        offsets = [np.zeros_like(p) for p in points]
    sizes = [len(p) for p in points]
    deformed = np.concatenate([p + np.asarray(o, dtype=float).reshape(-1, 3)
                               for p, o in zip(points, offsets)]) if points else np.zeros((0, 3))
    if len(deformed) == 0:
        return InstanceLabeling([np.zeros(n, dtype=np.int64) for n in sizes])
    if voxel is None:
        full = dbscan(deformed, eps, min_pts)
    else:
        reps, inv, counts = voxel_downsample(deformed, voxel)
        full = dbscan(reps, eps, min_pts, weights=counts)[inv]
    return InstanceLabeling.relabel(np.split(full, np.cumsum(sizes)[:-1]))


@dataclass
class _Track:
    id: int
    x: np.ndarray                 # state (px, py, pz, vx, vy, vz)
    P: np.ndarray
    last: int
    hits: list = field(default_factory=list)


class ConstantVelocityKF:
    """Linear Kalman filter with a constant-velocity model, position
    measurements, unit time step per frame."""

    def __init__(self, q: float = 0.5, r: float = 0.1, p0_vel: float = 100.0):
        self.q, self.r, self.p0_vel = q, r, p0_vel
        self.H = np.hstack([np.eye(3), np.zeros((3, 3))])

    def init(self, z):
        x = np.r_[np.asarray(z, dtype=float), np.zeros(3)]
        P = np.diag([self.r] * 3 + [self.p0_vel] * 3)
        return x, P

    def predict(self, x, P, steps: int = 1):
        F = np.eye(6)
        F[:3, 3:] = steps * np.eye(3)
        Q = self.q * np.diag([steps ** 3 / 3] * 3 + [steps] * 3)
        return F @ x, F @ P @ F.T + Q

    def update(self, x, P, z):
        S = self.H @ P @ self.H.T + self.r * np.eye(3)
        K = P @ self.H.T @ np.linalg.inv(S)
        x = x + K @ (np.asarray(z, dtype=float) - self.H @ x)
        P = (np.eye(6) - K @ self.H) @ P
        return x, P


def kalman_track(points, frame_labels, *, gate: float = 2.0, kf: ConstantVelocityKF | None = None) -> InstanceLabeling:
    """Greedy tracking of per-frame clusters by their centroids.

    ``points[i]`` are ego-aligned points of frame position ``i`` and
    ``frame_labels[i]`` their independent per-frame cluster ids (0 = noise).
    Tracks start in the first frame. In every later frame each track's
    centroid is predicted with a constant-velocity model; the closest
    (track, detection) pairs are matched greedily when their distance is
    below ``gate`` plus the predicted motion. Unmatched detections start new
    tracks; tracks missing a frame keep coasting on their prediction.
    """
    kf = kf or ConstantVelocityKF()
    tracks: list[_Track] = []
    out = []
    for i, (pts, lab) in enumerate(zip(points, frame_labels)):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        lab = np.asarray(lab, dtype=np.int64)
        det_ids = [int(k) for k in np.unique(lab) if k != 0]
        cents = np.array([pts[lab == k].mean(0) for k in det_ids]).reshape(-1, 3)
        assign = {}
        preds = []
        for tr in tracks:
            x, P = kf.predict(tr.x, tr.P, i - tr.last)
            preds.append((x, P))
        if tracks and det_ids:
            pairs = []
            for a, (tr, (x, _)) in enumerate(zip(tracks, preds)):
                motion = np.linalg.norm(x[:3] - tr.x[:3])
                for b in range(len(det_ids)):
                    d = np.linalg.norm(cents[b] - x[:3])
                    if d < gate + motion:
                        pairs.append((d, a, b))
            used_t, used_d = set(), set()
            for d, a, b in sorted(pairs):
                if a in used_t or b in used_d:
                    continue
                used_t.add(a)
                used_d.add(b)
                assign[b] = a
        for a, tr in enumerate(tracks):
            if a in assign.values():
                b = next(b for b, t in assign.items() if t == a)
                tr.x, tr.P = kf.update(*preds[a], cents[b])
                tr.last = i
                tr.hits.append(i)
        new = np.zeros(len(lab), dtype=np.int64)
        for b, k in enumerate(det_ids):
            if b in assign:
                tid = tracks[assign[b]].id
            else:
                x, P = kf.init(cents[b])
                tid = len(tracks) + 1
                tracks.append(_Track(tid, x, P, i, [i]))
            new[lab == k] = tid
        out.append(new)
    return InstanceLabeling.relabel(out)


def cluster_per_frame(points, eps: float = EPS, min_pts: int = MIN_PTS, voxel: float | None = VOXEL):
    """Independent DBSCAN per frame (input to the tracking baseline)."""
    out = []
    for p in points:
        p = np.asarray(p, dtype=float).reshape(-1, 3)
        if len(p) == 0:
            out.append(np.zeros(0, dtype=np.int64))
        elif voxel is None:
            out.append(dbscan(p, eps, min_pts))
        else:
            reps, inv, counts = voxel_downsample(p, voxel)
            out.append(dbscan(reps, eps, min_pts, weights=counts)[inv])
    return out
