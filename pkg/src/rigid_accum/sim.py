"""Synthetic LiDAR sequences with exact ground truth.

World geometry is sampled as surface points in each body's local frame.
Every frame places the bodies at their pose for that time and moves the
samples into the sensor frame. Points beyond the range are cut before
dropout and Gaussian noise are applied.

With ``sampling="fixed"`` the same surface samples reappear in every frame,
so a noise-free scene has exact point correspondences. ``sampling="sweep"``
draws a fresh set per frame with ground density centred on the current
sensor position, closer to how a spinning LiDAR revisits a scene.

Randomness is keyed by ``(seed, frame index)``, so a frame does not depend on
how many frames the scene has.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FlowField, Frame, FrameSequence, RigidTransform, apply_transform, compose
from .segmenter import Box, label_dynamic_sequence


@dataclass
class BodySpec:
    """Box-shaped rigid body moving on a unicycle path (speed along its
    heading, constant yaw rate)."""

    x: float
    y: float
    yaw: float = 0.0
    length: float = 4.5
    width: float = 1.9
    height: float = 1.6
    speed: float = 0.0
    yaw_rate: float = 0.0

    def pose(self, tau: float, z: float | None = None) -> RigidTransform:
        x, y, yaw = unicycle(self.x, self.y, self.yaw, self.speed, self.yaw_rate, tau)
        zc = 0.5 * self.height if z is None else z
        return RigidTransform.from_yaw(yaw, (x, y, zc))


@dataclass
class WallSpec:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float = 3.0


@dataclass
class SceneSpec:
    seed: int = 0
    num_frames: int = 5
    dt: float = 0.1
    ego_speed: float = 10.0
    ego_yaw_rate: float = 0.0
    sensor_height: float = 1.8
    walls: list = field(default_factory=list)
    buildings: list = field(default_factory=list)    # static background boxes
    parked: list = field(default_factory=list)       # static foreground boxes
    movers: list = field(default_factory=list)       # dynamic foreground boxes
    max_range: float = 40.0
    points_per_frame: int = 20000
    dropout: float = 0.0
    noise: float = 0.0
    occlusion: bool = False
    object_share: float = 0.25
    sampling: str = "fixed"          # "fixed" surface samples or a fresh "sweep" per frame

    def validate(self):
        if self.num_frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.sampling not in ("fixed", "sweep"):
            raise ValueError("sampling must be 'fixed' or 'sweep'")
        if self.points_per_frame < 1 or not self.max_range > 0:
            raise ValueError("sensor needs positive range and point budget")
        for v in (self.ego_speed, self.ego_yaw_rate, self.sensor_height):
            if not np.isfinite(v):
                raise ValueError("rates must be finite")
        for b in self.parked + self.movers + self.buildings:
            if min(b.length, b.width, b.height) <= 0:
                raise ValueError("body dimensions must be positive")


def default_scene(**overrides) -> SceneSpec:
    """Street scene: walls, buildings, 3 parked cars and 1 moving car."""
    spec = SceneSpec(
        walls=[WallSpec(-30, 11, 40, 11, 3.0), WallSpec(-30, -13, 40, -13, 2.5)],
        buildings=[BodySpec(18, 16, 0.1, 8, 6, 6), BodySpec(-15, -19, -0.2, 10, 8, 5),
                   BodySpec(-6, 14, 0.3, 5, 4, 4)],
        parked=[BodySpec(-8, 6.5, 0.05, 4.4, 1.8, 1.5), BodySpec(3, 7.0, -0.1, 4.8, 1.9, 1.6),
                BodySpec(14, 6.2, 0.0, 4.2, 1.8, 1.5)],
        movers=[BodySpec(-2, -5, 0.0, 4.6, 1.9, 1.6, speed=8.0, yaw_rate=0.15)],
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def crossing_scene(**overrides) -> SceneSpec:
    """Two cars whose swept paths cross while their target-frame positions
    are several meters apart; the ego vehicle is parked."""
    spec = SceneSpec(
        ego_speed=0.0,
        walls=[WallSpec(-30, 14, 30, 14, 3.0)],
        buildings=[BodySpec(-20, -20, 0.2, 10, 6, 5), BodySpec(20, -18, -0.1, 8, 8, 6)],
        movers=[BodySpec(-4.0, 0.0, 0.0, 4.4, 1.8, 1.5, speed=12.0),
                BodySpec(2.0, -4.5, np.pi / 2, 4.4, 1.8, 1.5, speed=12.0)],
        num_frames=5,
        object_share=0.3,
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def unicycle(x, y, yaw, speed, yaw_rate, tau):
    if abs(yaw_rate) < 1e-12:
        return x + speed * tau * np.cos(yaw), y + speed * tau * np.sin(yaw), yaw
    r = speed / yaw_rate
    y2 = yaw + yaw_rate * tau
    return x + r * (np.sin(y2) - np.sin(yaw)), y - r * (np.cos(y2) - np.cos(yaw)), y2


def _box_surface(rng, body: BodySpec, n: int) -> np.ndarray:
    """Uniform samples on the 5 visible faces (no bottom), body-local."""
    l, w, h = body.length, body.width, body.height
    faces = [  # (area, sampler)
        (l * w, lambda k: np.c_[rng.uniform(-l / 2, l / 2, k), rng.uniform(-w / 2, w / 2, k), np.full(k, h / 2)]),
        (l * h, lambda k: np.c_[rng.uniform(-l / 2, l / 2, k), np.full(k, w / 2), rng.uniform(-h / 2, h / 2, k)]),
        (l * h, lambda k: np.c_[rng.uniform(-l / 2, l / 2, k), np.full(k, -w / 2), rng.uniform(-h / 2, h / 2, k)]),
        (w * h, lambda k: np.c_[np.full(k, l / 2), rng.uniform(-w / 2, w / 2, k), rng.uniform(-h / 2, h / 2, k)]),
        (w * h, lambda k: np.c_[np.full(k, -l / 2), rng.uniform(-w / 2, w / 2, k), rng.uniform(-h / 2, h / 2, k)]),
    ]
    areas = np.array([a for a, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([f(k) for (_, f), k in zip(faces, counts)])


def _box_area(b: BodySpec):
    return b.length * b.width + 2 * b.height * (b.length + b.width)


@dataclass
class SimResult:
    spec: SceneSpec
    sequence: FrameSequence
    gt_ego: list                 # per frame position, sensor_t -> sensor_1
    gt_objects: dict             # instance id -> per frame position transform
    gt_flow: FlowField
    tracks: list                 # BoxTrack per foreground instance
    ego_poses: list              # world_from_sensor per frame
    body_poses: dict             # instance id -> world_from_body per frame
    bodies: dict                 # instance id -> BodySpec

    def boxes_at(self, i: int):
        """Boxes of all foreground bodies in frame ``i``'s sensor coordinates."""
        out = {}
        E_inv = self.ego_poses[i].inverse()
        for k, body in self.bodies.items():
            P = compose(E_inv, self.body_poses[k][i])
            out[k] = Box(tuple(P.translation), (body.length, body.width, body.height), P.yaw)
        return out


def generate_scene(spec: SceneSpec | None = None) -> SimResult:
    """Render a scene specification into frames with exact ground truth."""
    from .gt import BoxTrack  # avoid an import cycle at module load

    spec = spec or default_scene()
    spec.validate()
    T, dt = spec.num_frames, spec.dt
    taus = [i * dt for i in range(T)]
    ego_poses = []
    for tau in taus:
        x, y, yaw = unicycle(0.0, 0.0, 0.0, spec.ego_speed, spec.ego_yaw_rate, tau)
        ego_poses.append(RigidTransform.from_yaw(yaw, (x, y, spec.sensor_height)))

    fg_bodies = spec.parked + spec.movers
    bodies = {k + 1: b for k, b in enumerate(fg_bodies)}
    body_poses = {k: [b.pose(tau) for tau in taus] for k, b in bodies.items()}

    n_obj = int(round(spec.points_per_frame * spec.object_share)) if fg_bodies else 0
    if spec.sampling == "fixed":
        # one set of surface samples reused by every frame
        static_world, body_local = _sample_world(
            np.random.default_rng([spec.seed, 0]), spec, bodies, n_obj, (0.0, 0.0))
        world = [(static_world, body_local)] * T
    else:
        # a fresh sweep per frame, ground density centred on the sensor
        world = [_sample_world(np.random.default_rng([spec.seed, 0, i + 1]), spec, bodies, n_obj,
                               tuple(ego_poses[i].translation[:2])) for i in range(T)]

    E1_inv = ego_poses[0].inverse()
    gt_ego = [compose(E1_inv, E) for E in ego_poses]
    gt_objects = {}
    for k in bodies:
        B1 = body_poses[k][0]
        gt_objects[k] = [compose(compose(E1_inv, B1), compose(body_poses[k][i].inverse(), ego_poses[0]))
                         for i in range(T)]

    frames, flows = [], []
    for i in range(T):
        frng = np.random.default_rng([spec.seed, i + 1])
        static_world, body_local = world[i]
        E_inv = ego_poses[i].inverse()
        pts = [apply_transform(E_inv, static_world)]
        inst = [np.zeros(len(static_world), dtype=np.int64)]
        for k, loc in body_local.items():
            pts.append(apply_transform(compose(E_inv, body_poses[k][i]), loc))
            inst.append(np.full(len(loc), k, dtype=np.int64))
        pts = np.concatenate(pts)
        inst = np.concatenate(inst)
        keep = np.hypot(pts[:, 0], pts[:, 1]) <= spec.max_range
        keep &= frng.uniform(size=len(pts)) >= spec.dropout
        if spec.occlusion:
            keep &= _visible(pts, keep)
        pts, inst = pts[keep], inst[keep]
        if spec.noise > 0:
            pts = pts + frng.normal(scale=spec.noise, size=pts.shape)
        moved = apply_transform(gt_ego[i], pts)
        for k in bodies:
            sel = inst == k
            moved[sel] = apply_transform(gt_objects[k][i], moved[sel])
        flows.append(np.zeros_like(pts) if i == 0 else moved - pts)
        frames.append(Frame(pts, i + 1, foreground=inst > 0, instance=inst))

    gt_flow = FlowField(flows)
    seq = FrameSequence(frames, dt, gt_flow)
    dyn = label_dynamic_sequence(seq, gt_flow, gt_ego)
    frames = [Frame(f.points, f.index, f.foreground, d, f.instance) for f, d in zip(frames, dyn)]
    seq = FrameSequence(frames, dt, gt_flow)

    result = SimResult(spec, seq, gt_ego, {k: list(v) for k, v in gt_objects.items()},
                       gt_flow, [], ego_poses, body_poses, bodies)
    tracks = []
    for k, b in bodies.items():
        boxes = [result.boxes_at(i)[k] for i in range(T)]
        tracks.append(BoxTrack(k, list(range(1, T + 1)), boxes))
    result.tracks = tracks
    return result


def _sample_world(rng, spec: SceneSpec, bodies: dict, n_obj: int, center):
    """Static background points in world coordinates and per-body local
    surface samples."""
    n_bg = spec.points_per_frame - n_obj
    R = spec.max_range
    bg_parts = [("ground", 0.5 * np.pi * R * R)]
    bg_parts += [("wall", np.hypot(w.x1 - w.x0, w.y1 - w.y0) * w.height) for w in spec.walls]
    bg_parts += [("bldg", _box_area(b)) for b in spec.buildings]
    areas = np.array([a for _, a in bg_parts])
    bg_counts = rng.multinomial(n_bg, areas / areas.sum())
    static_pts = []
    # density falls off ~1/r like a spinning LiDAR, with a blind spot under the car
    r = rng.uniform(2.0, R, size=bg_counts[0])
    th = rng.uniform(0, 2 * np.pi, size=bg_counts[0])
    static_pts.append(np.c_[center[0] + r * np.cos(th), center[1] + r * np.sin(th),
                            np.zeros(bg_counts[0])])
    for w, k in zip(spec.walls, bg_counts[1:1 + len(spec.walls)]):
        s = rng.uniform(size=k)
        static_pts.append(np.c_[w.x0 + s * (w.x1 - w.x0), w.y0 + s * (w.y1 - w.y0),
                                rng.uniform(0, w.height, size=k)])
    for b, k in zip(spec.buildings, bg_counts[1 + len(spec.walls):]):
        static_pts.append(b.pose(0.0).apply(_box_surface(rng, b, int(k))))
    static_world = np.concatenate(static_pts)

    body_local = {}
    if bodies:
        fg = list(bodies.values())
        areas = np.array([_box_area(b) for b in fg])
        obj_counts = rng.multinomial(n_obj, areas / areas.sum())
        for (k, b), n in zip(bodies.items(), obj_counts):
            body_local[k] = _box_surface(rng, b, int(n))
    return static_world, body_local


def _visible(pts, keep, bin_deg: float = 0.4, tolerance: float = 0.3):
    """Coarse z-buffer: keep points within ``tolerance`` of the nearest
    return in their angular bin."""
    rng_ = np.linalg.norm(pts, axis=1)
    az = np.floor(np.degrees(np.arctan2(pts[:, 1], pts[:, 0])) / bin_deg).astype(np.int64)
    el = np.floor(np.degrees(np.arcsin(np.clip(pts[:, 2] / np.maximum(rng_, 1e-9), -1, 1))) / bin_deg)
    key = az * 100000 + el.astype(np.int64)
    out = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return out
    uniq, inv = np.unique(key[idx], return_inverse=True)
    nearest = np.full(len(uniq), np.inf)
    np.minimum.at(nearest, inv, rng_[idx])
    out[idx] = rng_[idx] <= nearest[inv] + tolerance
    return out
