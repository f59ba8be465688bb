"""End-to-end accumulation: features, ego-motion, segmentation, association,
object motion and flow composition.

``run`` is deterministic for a fixed config: every random draw uses a
generator seeded from ``(seed, frame index)``, and results are assembled in
frame order whatever the number of worker threads.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .assoc import (InstanceLabeling, cluster_per_frame, cluster_spatiotemporal, compute_gt_offsets,
                    kalman_track)
from .core import FlowField, Frame, FrameSequence, RigidTransform, apply_transform
from .errors import AccumError, ConfigError
from .grid import DEFAULT_EXTENT, DEFAULT_PILLAR, DEFAULT_Z_MIN, make_featurizer, pillarize
from .matcher import NUSCENES_VMAX, WAYMO_VMAX, estimate_ego_motion
from .objmotion import ObjectMotionSet, chain_poses, estimate_object_motions, refine_ego_icp
from .segmenter import SegmentationScores, segment_motion_residual

log = logging.getLogger(__name__)

PROFILES = {
    "waymo": {"v_max": WAYMO_VMAX, "icp_ego": 0.1, "icp_obj": 0.15},
    "nuscenes": {"v_max": NUSCENES_VMAX, "icp_ego": 0.2, "icp_obj": 0.25},
}


@dataclass
class PipelineConfig:
    profile: str = "waymo"
    extent: tuple = DEFAULT_EXTENT
    pillar_size: tuple = DEFAULT_PILLAR
    z_min: float = DEFAULT_Z_MIN
    featurizer: str = "oracle-position"
    n_ego: int = 1024
    tau: float = 0.5
    sinkhorn_iters: int = 5
    slack_cost: float = 0.5
    temperature: float = 0.05
    v_max: float = WAYMO_VMAX
    icp_ego: float = 0.1
    icp_obj: float = 0.15
    ego_refine: bool = True
    eps: float = 0.75
    min_pts: int = 5
    voxel: float = 0.15
    association: str = "dbscan"          # or "kalman"
    oracle_segmentation: bool = True
    oracle_offsets: bool = True
    residual_radius: float = 2.0
    chained: bool = False
    lam_offset: float = 1.0
    lam_obj: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.pillar_size = tuple(float(v) for v in self.pillar_size)
        self.validate()

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.association not in ("dbscan", "kalman"):
            raise ConfigError("association must be 'dbscan' or 'kalman'")
        for name in ("n_ego", "sinkhorn_iters", "min_pts", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("slack_cost", "temperature", "v_max", "icp_ego", "icp_obj", "eps", "voxel",
                     "residual_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.pillar_size) != 3 or min(self.pillar_size) <= 0:
            raise ConfigError("pillar_size needs three positive values")
        if len(self.extent) != 4:
            raise ConfigError("extent needs four values")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")

    @classmethod
    def for_profile(cls, name: str = "waymo", **overrides) -> "PipelineConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(profile=name, **{**PROFILES[name], **overrides})

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from string values (config files); the profile's defaults
        apply first, explicit keys override them."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in fields:
                raise ConfigError(f"unknown pipeline option {k!r}")
            kw[k] = _coerce(fields[k].default, v, k)
        return cls.for_profile(kw.pop("profile", "waymo"), **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["extent"] = list(self.extent)
        d["pillar_size"] = list(self.pillar_size)
        return d


def _coerce(default, value, key):
    if not isinstance(value, str):
        return value
    s = value.strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            return tuple(float(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return s


class FeatureCache:
    """Per-frame pillar grids keyed by frame content and grid settings, so
    growing a sequence by one frame only pillarizes the new frame."""

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(frame: Frame, target, cfg: PipelineConfig):
        h = hashlib.sha1(np.ascontiguousarray(frame.points).tobytes())
        if target is not None:
            h.update(np.ascontiguousarray(target).tobytes())
        return (frame.index, h.hexdigest(), cfg.extent, cfg.pillar_size, cfg.z_min, cfg.featurizer)

    def get_or_build(self, key, build):
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
        grid = build()
        with self._lock:
            self.misses += 1
            self._store.setdefault(key, grid)
            return self._store[key]

    def __len__(self):
        return len(self._store)


@dataclass
class AccumulationResult:
    flow: FlowField
    ego: list
    objects: ObjectMotionSet
    segmentation: SegmentationScores
    labeling: InstanceLabeling        # full resolution, 0 for non-dynamic points
    diagnostics: dict = field(default_factory=dict)


def _cell_scores(grid, point_scores):
    s = np.zeros(grid.counts.size)
    c = grid.point_cell
    m = c >= 0
    np.maximum.at(s, c[m], np.asarray(point_scores, dtype=float)[m])
    return s.reshape(grid.shape)


def _targets_for_features(seq: FrameSequence, cfg: PipelineConfig):
    if cfg.featurizer != "oracle-position":
        return [None] * len(seq.frames)
    if seq.gt_flow is None:
        raise ConfigError("oracle-position features need ground-truth flow in the sequence")
    return [f.points + seq.gt_flow[i] for i, f in enumerate(seq.frames)]


def run(seq: FrameSequence, config: PipelineConfig | None = None,
        cache: FeatureCache | None = None) -> AccumulationResult:
    """Accumulate a sequence onto its first frame."""
    cfg = config or PipelineConfig()
    if len(seq.frames) < 2:
        raise ConfigError("need at least two frames")
    T = len(seq.frames)
    diag = {"timings": {}, "ego": [], "fallbacks": [], "errors": []}
    timer = time.perf_counter
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    def pmap(fn, items):
        items = list(items)
        return list(pool.map(fn, items)) if pool else [fn(x) for x in items]

    try:
        # features
        t0 = timer()
        featurizer = make_featurizer(cfg.featurizer)
        targets = _targets_for_features(seq, cfg)
        cache = cache if cache is not None else FeatureCache()

        def grid_of(i):
            f = seq.frames[i]
            key = FeatureCache.key(f, targets[i], cfg)
            return cache.get_or_build(key, lambda: pillarize(
                f, cfg.extent, cfg.pillar_size, featurizer, z_min=cfg.z_min, target=targets[i]))

        grids = pmap(grid_of, range(T))
        diag["timings"]["features"] = timer() - t0
        diag["cache"] = {"hits": cache.hits, "misses": cache.misses}

        # foreground scores (the matcher needs them before ego-motion)
        fg = [f.foreground.astype(float) for f in seq.frames]
        if cfg.oracle_segmentation:
            static_for_ego = [~(f.dynamic & f.foreground) for f in seq.frames]
        else:
            static_for_ego = [~f.foreground for f in seq.frames]

        # ego-motion
        t0 = timer()
        ego = _estimate_ego(seq, grids, featurizer, fg, static_for_ego, cfg, pmap, diag)
        diag["timings"]["ego_motion"] = timer() - t0
        aligned = [apply_transform(ego[i], f.points) for i, f in enumerate(seq.frames)]

        # motion segmentation
        t0 = timer()
        if cfg.oracle_segmentation:
            seg = SegmentationScores.from_frames(seq)
        else:
            seg = segment_motion_residual(aligned, [f.foreground for f in seq.frames],
                                          [seq.elapsed(i) for i in range(T)], cfg.residual_radius)
        dyn = [seg.dynamic_mask(i) for i in range(T)]
        diag["timings"]["segmentation"] = timer() - t0

        # association
        t0 = timer()
        labeling = _associate(seq, aligned, dyn, cfg, diag)
        diag["timings"]["association"] = timer() - t0

        # object motion
        t0 = timer()
        objects = estimate_object_motions(labeling.labels, aligned, max_corr_dist=cfg.icp_obj)
        diag["timings"]["object_motion"] = timer() - t0
        diag["objects"] = objects.diagnostics

        # flow composition with per-instance fallbacks
        t0 = timer()
        flows = [np.zeros_like(seq.frames[0].points)]
        for i in range(1, T):
            X = seq.frames[i].points
            moved = aligned[i].copy()
            lab = labeling.labels[i]
            for k in np.unique(lab[lab != 0]):
                sel = lab == k
                Tk = objects.get(int(k), i)
                if Tk is None:
                    diag["fallbacks"].append({"instance": int(k), "frame": i, "level": "ego_only"})
                    continue
                if objects.method.get((int(k), i)) == "centroid":
                    diag["fallbacks"].append({"instance": int(k), "frame": i, "level": "centroid"})
                moved[sel] = apply_transform(Tk, aligned[i][sel])
            n_noise = int((dyn[i] & (lab == 0)).sum())
            if n_noise:
                diag["fallbacks"].append({"frame": i, "level": "ego_only_noise", "points": n_noise})
            flows.append(moved - X)
        diag["timings"]["flow"] = timer() - t0
    finally:
        if pool:
            pool.shutdown()
    return AccumulationResult(FlowField(flows), ego, objects, seg, labeling, diag)


def _estimate_ego(seq, grids, featurizer, fg, static, cfg, pmap, diag):
    T = len(seq.frames)

    def one(args):
        i, j = args           # estimate frame i -> frame j
        d = {"frame": i, "reference": j}
        cells_i = _cell_scores(grids[i], fg[i])
        cells_j = _cell_scores(grids[j], fg[j])
        elapsed = (seq.frames[i].index - seq.frames[j].index) * seq.interval
        rng = np.random.default_rng([cfg.seed, seq.frames[i].index, seq.frames[j].index])
        try:
            Tm, md = estimate_ego_motion(
                grids[i], grids[j], embed=featurizer.embed, elapsed=elapsed, fg_t=cells_i,
                fg_1=cells_j, n_ego=cfg.n_ego, tau=cfg.tau, iters=cfg.sinkhorn_iters,
                slack_cost=cfg.slack_cost, temperature=cfg.temperature, v_max=cfg.v_max, rng=rng)
            d.update(md)
        except AccumError as e:
            Tm = RigidTransform.identity()
            d["matcher_error"] = f"{type(e).__name__}: {e}"
        d["matcher_translation"] = Tm.translation.tolist()
        if cfg.ego_refine:
            Tm = refine_ego_icp(seq.frames[i].points[static[i]], seq.frames[j].points[static[j]],
                                Tm, cfg.icp_ego)
        return Tm, d

    pairs = [(i, i - 1) if cfg.chained else (i, 0) for i in range(1, T)]
    out = pmap(one, pairs)
    for _, d in out:
        diag["ego"].append(d)
        if "matcher_error" in d:
            diag["errors"].append(d["matcher_error"])
    est = [RigidTransform.identity()] + [T_ for T_, _ in out]
    return chain_poses(est) if cfg.chained else est


def _target_centroids(seq, aligned):
    """Target-frame centroid per ground-truth instance. Instances absent
    from the target frame use the centroid of their flow-warped points."""
    cents = {}
    f0 = seq.frames[0]
    for k in np.unique(f0.instance[f0.instance != 0]):
        cents[int(k)] = f0.points[f0.instance == k].mean(0)
    if seq.gt_flow is not None:
        for i in range(1, len(seq.frames)):
            f = seq.frames[i]
            for k in np.unique(f.instance[f.instance != 0]):
                if int(k) not in cents:
                    sel = f.instance == k
                    cents[int(k)] = (f.points[sel] + seq.gt_flow[i][sel]).mean(0)
    return cents


def _associate(seq, aligned, dyn, cfg, diag) -> InstanceLabeling:
    T = len(seq.frames)
    pts = [aligned[i][dyn[i]] for i in range(T)]
    if cfg.association == "kalman":
        per_frame = cluster_per_frame(pts, cfg.eps, cfg.min_pts, cfg.voxel)
        sub = kalman_track(pts, per_frame)
    else:
        offsets = None
        if cfg.oracle_offsets:
            cents = _target_centroids(seq, aligned)
            offsets = []
            for i in range(T):
                inst = seq.frames[i].instance[dyn[i]]
                known = np.isin(inst, list(cents)) | (inst == 0)
                if not known.all():
                    diag["errors"].append(f"frame {i}: dynamic points without a centroid")
                offsets.append(compute_gt_offsets(pts[i], np.where(known, inst, 0), cents))
        sub = cluster_spatiotemporal(pts, offsets, cfg.eps, cfg.min_pts, cfg.voxel)
    full = []
    for i in range(T):
        lab = np.zeros(len(seq.frames[i]), dtype=np.int64)
        lab[dyn[i]] = sub.labels[i]
        full.append(lab)
    return InstanceLabeling(full)


def accumulate_points(seq: FrameSequence, result: AccumulationResult) -> Frame:
    """Merge all frames into the target frame; source points move by their
    flow. ``extras`` record the source frame index and predicted instance."""
    pts, src, inst, fg, dyn = [], [], [], [], []
    for i, f in enumerate(seq.frames):
        pts.append(f.points + result.flow[i])
        src.append(np.full(len(f), f.index, dtype=np.int64))
        inst.append(result.labeling.labels[i])
        fg.append(result.segmentation.foreground_mask(i) | (result.labeling.labels[i] != 0))
        dyn.append(result.segmentation.dynamic_mask(i))
    return Frame(np.concatenate(pts), seq.frames[0].index, np.concatenate(fg), np.concatenate(dyn),
                 np.concatenate(inst), extras={"source_frame": np.concatenate(src)})


def nearest_neighbor_flow(seq: FrameSequence) -> FlowField:
    """Unconstrained baseline: each source point flows to its nearest
    neighbour in the target frame."""
    tree = cKDTree(seq.frames[0].points)
    flows = [np.zeros_like(seq.frames[0].points)]
    for f in seq.frames[1:]:
        _, j = tree.query(f.points)
        flows.append(seq.frames[0].points[j] - f.points)
    return FlowField(flows)


def ego_only_flow(seq: FrameSequence, ego) -> FlowField:
    flows = [np.zeros_like(seq.frames[0].points)]
    for i in range(1, len(seq.frames)):
        X = seq.frames[i].points
        flows.append(apply_transform(ego[i], X) - X)
    return FlowField(flows)


def pose_errors(est, gt):
    """``(translation m, rotation rad)`` error per frame position."""
    return [(float(np.linalg.norm(a.translation - b.translation)), float(a.angle_to(b)))
            for a, b in zip(est, gt)]


__all__ = ["PipelineConfig", "PROFILES", "FeatureCache", "AccumulationResult", "run",
           "accumulate_points", "nearest_neighbor_flow", "ego_only_flow", "pose_errors"]
