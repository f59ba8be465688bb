"""Per-instance rigid motion: centroid initialization, point-to-point ICP and
the two-round refinement used in place of a learned pose regressor. Also
hosts ICP refinement of the ego-motion and pose chaining.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import RigidTransform, apply_transform, compose, kabsch_weighted
from .errors import DegenerateConfiguration, MissingTargetObservation

log = logging.getLogger(__name__)

ICP_MAX_ITERS = 30
ICP_TOL = 1e-6


@dataclass
class ICPResult:
    transform: RigidTransform
    residuals: list            # mean gated pair distance per iteration
    n_pairs: int
    converged: bool
    fell_back: bool = False


def nearest(tree: cKDTree, queries, max_dist: float):
    """Nearest neighbour within ``max_dist`` with ties going to the lowest
    index. Returns ``(dist, index)``; unmatched queries get ``inf`` / ``-1``."""
    n = tree.n
    k = 2 if n > 1 else 1
    d, j = tree.query(queries, k=k, distance_upper_bound=max_dist)
    if k == 2:
        tie = (d[:, 1] == d[:, 0]) & np.isfinite(d[:, 0])
        d0, j0 = d[:, 0], j[:, 0].copy()
        j0[tie] = np.minimum(j[tie, 0], j[tie, 1])
        d, j = d0, j0
    j = np.where(np.isfinite(d), j, -1)
    return d, j


def icp(source, target, T_init: RigidTransform | None = None, max_corr_dist: float = 0.1,
        max_iters: int = ICP_MAX_ITERS, tol: float = ICP_TOL, tree: cKDTree | None = None) -> ICPResult:
    """Point-to-point ICP with a hard correspondence gate.

    Each iteration pairs every transformed source point with its nearest
    target point within ``max_corr_dist`` and re-solves the full transform
    with Kabsch. Stops when the relative change of the mean pair distance
    drops below ``tol``. The lowest-residual transform seen is returned; if
    fewer than 3 pairs survive the gate at the start, ``T_init`` comes back
    unchanged.
    """
    T_init = RigidTransform.identity() if T_init is None else T_init
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(src) < 3 or len(tgt) < 3:
        return ICPResult(T_init, [], 0, False, fell_back=True)
    tree = cKDTree(tgt) if tree is None else tree
    T = T_init
    best, best_res, best_pairs = T_init, np.inf, 0
    history = []
    converged = False
    for _ in range(max_iters):
        cur = apply_transform(T, src)
        d, j = nearest(tree, cur, max_corr_dist)
        ok = j >= 0
        if ok.sum() < 3:
            break
        res = float(d[ok].mean())
        history.append(res)
        if res < best_res:
            best, best_res, best_pairs = T, res, int(ok.sum())
        if len(history) > 1 and abs(history[-2] - res) <= tol * max(history[-2], 1e-300):
            converged = True
            break
        if res == 0.0:
            converged = True
            break
        try:
            T = kabsch_weighted(src[ok], tgt[j[ok]])
        except DegenerateConfiguration:
            break
    if not history:
        return ICPResult(T_init, [], 0, False, fell_back=True)
    return ICPResult(best, history, best_pairs, converged)


def icp_refine(source, target, T_init: RigidTransform, max_corr_dist: float,
               max_iters: int = ICP_MAX_ITERS, tol: float = ICP_TOL) -> RigidTransform:
    """Transform-only wrapper around :func:`icp`."""
    return icp(source, target, T_init, max_corr_dist, max_iters, tol).transform


def refine_ego_icp(static_t, static_1, T_ego: RigidTransform, threshold: float,
                   max_iters: int = ICP_MAX_ITERS) -> RigidTransform:
    """Test-time ICP refinement of a matcher ego estimate on static points."""
    return icp(static_t, static_1, T_ego, threshold, max_iters).transform


def centroid_init(points_t, points_1, instance=None) -> RigidTransform:
    """Pure translation moving the (ego-aligned) source centroid onto the
    target centroid."""
    p1 = np.asarray(points_1, dtype=float).reshape(-1, 3)
    pt = np.asarray(points_t, dtype=float).reshape(-1, 3)
    if len(p1) == 0:
        raise MissingTargetObservation(instance)
    if len(pt) == 0:
        raise ValueError("instance has no points in the source frame")
    return RigidTransform.from_translation(p1.mean(0) - pt.mean(0))


@dataclass
class ObjectMotionSet:
    """``transforms[k][i]``: motion of instance ``k`` at frame position ``i``
    applied after ego alignment. Present iff the instance was observed."""

    transforms: dict = field(default_factory=dict)
    method: dict = field(default_factory=dict)     # (k, i) -> "icp" | "centroid"
    diagnostics: list = field(default_factory=list)

    def valid(self, k, i) -> bool:
        return i in self.transforms.get(k, {})

    def get(self, k, i):
        return self.transforms.get(k, {}).get(i)


def estimate_object_motions(instance_labels, aligned, *, max_corr_dist: float = 0.15,
                            max_iters: int = ICP_MAX_ITERS, instances=None) -> ObjectMotionSet:
    """Two-round motion estimate per instance and source frame.

    ``aligned[i]`` are ego-aligned points of frame position ``i`` (position 0
    is the target frame) and ``instance_labels[i]`` their instance ids.
    Round 1 translates centroids; round 2 runs ICP on the round-1 result
    against the target-frame instance points; the composition is returned.
    Instances unseen in the target frame get no transforms; instances with
    fewer than 3 points on either side keep the round-1 estimate.
    """
    out = ObjectMotionSet()
    lab1 = np.asarray(instance_labels[0])
    ids = instances
    if ids is None:
        ids = sorted({int(k) for lab in instance_labels for k in np.unique(lab) if k != 0})
    for k in ids:
        tgt = aligned[0][lab1 == k]
        if len(tgt) == 0:
            out.diagnostics.append({"instance": k, "event": "missing_target"})
            log.info("instance %d not observed in the target frame", k)
            continue
        tree = cKDTree(tgt) if len(tgt) >= 3 else None
        per = {0: RigidTransform.identity()}
        out.method[(k, 0)] = "identity"
        for i in range(1, len(aligned)):
            src = aligned[i][np.asarray(instance_labels[i]) == k]
            if len(src) == 0:
                continue
            T1 = centroid_init(src, tgt, k)
            if len(src) < 3 or tree is None:
                per[i] = T1
                out.method[(k, i)] = "centroid"
                out.diagnostics.append({"instance": k, "frame": i, "event": "too_few_points",
                                        "n_source": int(len(src)), "n_target": int(len(tgt))})
                continue
            moved = apply_transform(T1, src)
            r = icp(moved, tgt, None, max_corr_dist, max_iters, tree=tree)
            if r.fell_back:
                per[i] = T1
                out.method[(k, i)] = "centroid"
                out.diagnostics.append({"instance": k, "frame": i, "event": "icp_no_pairs"})
            else:
                per[i] = compose(r.transform, T1)
                out.method[(k, i)] = "icp"
        out.transforms[k] = per
    return out


def chain_poses(pairwise) -> list:
    """Compose frame-to-previous transforms into frame-to-target ones.

    ``pairwise[i]`` maps frame position ``i`` into position ``i - 1``
    (``pairwise[0]`` is ignored). Errors accumulate along the chain.
    """
    out = [RigidTransform.identity()]
    for T in pairwise[1:]:
        out.append(compose(out[-1], T))
    return out
