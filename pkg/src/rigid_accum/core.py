"""Geometric primitives: rigid transforms, frames, weighted Kabsch and
rigid scene-flow composition.

Conventions
-----------
Points are ``(n, 3)`` float arrays. Quaternions are stored ``(w, x, y, z)``,
normalized, with ``w >= 0``. ``compose(a, b)`` applies ``b`` first, so
``compose(a, b).apply(x) == a.apply(b.apply(x))``.

For a source frame ``t`` the ego transform maps sensor-``t`` coordinates into
the target (first) frame. An object transform maps *ego-aligned* object points
of frame ``t`` onto the object's target-frame location, so a dynamic point
moves by ``T_k * T_ego``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateConfiguration, MissingObjectTransform


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest diagonal term for stability
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return np.asarray(q)


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("quaternion must be finite and nonzero")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): unit quaternion ``rotation`` (w, x, y, z) and
    ``translation`` in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _canonical_quat(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        if M.shape == (4, 4):
            return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])
        if M.shape == (3, 3):
            return cls(matrix_to_quat(M), np.zeros(3))
        raise ValueError(f"expected 3x3 or 4x4 matrix, got {M.shape}")

    @classmethod
    def from_rt(cls, R, t) -> "RigidTransform":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(translation=t)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        h = 0.5 * yaw
        return cls(np.array([np.cos(h), 0.0, 0.0, np.sin(h)]), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle
        return cls(np.concatenate([[np.cos(h)], np.sin(h) * axis]), translation)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    @property
    def yaw(self) -> float:
        R = self.R
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def apply(self, points) -> np.ndarray:
        return apply_transform(self, points)

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform.from_rt(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def angle_to(self, other: "RigidTransform") -> float:
        """Geodesic rotation distance in radians."""
        # atan2 on the relative quaternion; arccos of the dot product loses
        # about 1e-8 rad of resolution near zero
        a, b = self.rotation, other.rotation
        w = a @ b
        v = a[0] * b[1:] - b[0] * a[1:] - np.cross(a[1:], b[1:])
        return 2.0 * float(np.arctan2(np.linalg.norm(v), abs(w)))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return (self.angle_to(other) <= atol
                and np.linalg.norm(self.translation - other.translation) <= atol)

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(q={q}, t={t})"


def apply_transform(T: RigidTransform, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return T.R @ X + T.translation
    return X @ T.R.T + T.translation


def compose(T2: RigidTransform, T1: RigidTransform) -> RigidTransform:
    """Return ``T2 * T1``: ``T1`` is applied first."""
    R2 = T2.R
    return RigidTransform.from_rt(R2 @ T1.R, R2 @ T1.translation + T2.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def kabsch_weighted(source, target, weights=None, *, rank_tol: float = 1e-12) -> RigidTransform:
    """Closed-form ``argmin_T sum_l w_l ||T(p_l) - q_l||^2``.

    Raises :class:`DegenerateConfiguration` when the weighted cross-covariance
    has rank < 2, i.e. the weighted points are coincident or collinear.
    """
    P = np.asarray(source, dtype=float)
    Q = np.asarray(target, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError("source and target must both be (n, 3)")
    if len(P) < 3:
        raise ValueError("need at least 3 point pairs")
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateConfiguration("weights sum to zero")
    w = w / wsum

    cp = w @ P
    cq = w @ Q
    Pc = P - cp
    Qc = Q - cq
    H = (Pc * w[:, None]).T @ Qc
    U, S, Vt = np.linalg.svd(H)
    scale = max(np.sqrt((w * (Pc ** 2).sum(1)).sum() * (w * (Qc ** 2).sum(1)).sum()), 1e-300)
    if S[1] <= rank_tol * scale:
        raise DegenerateConfiguration("weighted points are collinear or coincident")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform.from_rt(R, cq - R @ cp)


@dataclass(frozen=True, eq=False)
class Frame:
    """One LiDAR sweep in its own sensor coordinates.

    Per-point attributes default to "background, static, no instance".
    ``extras`` holds any additional per-point arrays (provenance etc.).
    """

    points: np.ndarray
    index: int = 1
    foreground: np.ndarray | None = None
    dynamic: np.ndarray | None = None
    instance: np.ndarray | None = None
    intensity: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("frame contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name, dtype in (("foreground", bool), ("dynamic", bool), ("instance", np.int64)):
            v = getattr(self, name)
            v = np.zeros(n, dtype=dtype) if v is None else np.asarray(v).astype(dtype).reshape(n)
            object.__setattr__(self, name, v)
        if self.intensity is not None:
            object.__setattr__(self, "intensity", np.asarray(self.intensity, dtype=float).reshape(n))
        if np.any(self.instance < 0):
            raise ValueError("instance ids must be >= 0")
        if np.any((self.instance != 0) & ~self.foreground):
            raise ValueError("points with an instance id must be foreground")

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "Frame":
        return Frame(
            self.points[mask], self.index, self.foreground[mask], self.dynamic[mask],
            self.instance[mask], None if self.intensity is None else self.intensity[mask],
            {k: np.asarray(v)[mask] for k, v in self.extras.items()},
        )


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-frame flow vectors. ``vectors[0]`` belongs to the target frame and
    is identically zero; ``vectors[i]`` has one row per point of frame ``i``."""

    vectors: list

    def __post_init__(self):
        object.__setattr__(self, "vectors",
                           [np.asarray(v, dtype=float).reshape(-1, 3) for v in self.vectors])

    def __len__(self):
        return len(self.vectors)

    def __getitem__(self, i) -> np.ndarray:
        return self.vectors[i]

    @classmethod
    def zeros_like(cls, seq: "FrameSequence") -> "FlowField":
        return cls([np.zeros((len(f), 3)) for f in seq.frames])


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Ordered frames; ``frames[0]`` is the target frame.

    ``gt_flow`` is optional ground truth used by oracle components and by
    evaluation.
    """

    frames: list
    interval: float = 0.1
    gt_flow: FlowField | None = None

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("frame interval must be positive")
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        if self.gt_flow is not None:
            if len(self.gt_flow) != len(self.frames) or any(
                    len(v) != len(f) for v, f in zip(self.gt_flow.vectors, self.frames)):
                raise ValueError("ground-truth flow does not match frame sizes")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    def head(self, n: int) -> "FrameSequence":
        gt = None if self.gt_flow is None else FlowField(self.gt_flow.vectors[:n])
        return FrameSequence(self.frames[:n], self.interval, gt)

    def elapsed(self, i: int) -> float:
        """Seconds between frame position ``i`` and the target frame."""
        return (self.frames[i].index - self.frames[0].index) * self.interval


def compose_scene_flow(seq: FrameSequence, ego: Sequence[RigidTransform],
                       objects: Mapping[int, Mapping[int, RigidTransform]],
                       labels: Sequence[np.ndarray]) -> FlowField:
    """Rigid flow per point: static points move by the ego transform, points
    of instance ``k`` by ``objects[k][i] * ego[i]``.

    ``ego`` and ``labels`` are indexed by frame position; ``objects[k]`` maps
    frame position to transform. Label 0 means static.
    """
    flows = [np.zeros((len(seq.frames[0]), 3))]
    for i in range(1, len(seq.frames)):
        X = seq.frames[i].points
        lab = np.asarray(labels[i])
        aligned = apply_transform(ego[i], X)
        moved = aligned.copy()
        for k in np.unique(lab[lab != 0]):
            try:
                Tk = objects[int(k)][i]
            except KeyError:
                raise MissingObjectTransform(int(k), seq.frames[i].index) from None
            sel = lab == k
            moved[sel] = apply_transform(Tk, aligned[sel])
        flows.append(moved - X)
    return FlowField(flows)
