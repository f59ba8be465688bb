"""Soft pillar matching and closed-form ego-motion.

Pipeline per source frame: sample background pillars on both sides, compare
their unit features with ``M = 2 - 2 <f_t, f_1>``, balance ``exp(-M / T)``
padded with a slack row and column by alternating log-space row/column
normalization, mask by a physical reachability radius, and solve the weighted
registration with Kabsch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import RigidTransform, apply_transform, kabsch_weighted
from .errors import InsufficientBackground, ZeroFeature
from .grid import PillarGrid

WAYMO_VMAX = 30.0
NUSCENES_VMAX = 10.0


@dataclass
class SoftAssignment:
    """``matrix`` is ``(N+1, M+1)``; the last row and column are slack."""

    matrix: np.ndarray
    iterations: int
    slack_cost: float
    temperature: float = 1.0
    support: np.ndarray | None = None
    marginal_error: list = field(default_factory=list)

    @property
    def core(self) -> np.ndarray:
        return self.matrix[:-1, :-1]

    def row_sums(self):
        return self.matrix[:-1, :].sum(axis=1)

    def col_sums(self):
        return self.matrix[:, :-1].sum(axis=0)


def build_cost_matrix(F_t, F_1, *, tol: float = 1e-6) -> np.ndarray:
    """``M[l, m] = 2 - 2 <f_l, f_m>`` for L2-normalized feature rows."""
    F_t = _checked_unit(F_t, tol)
    F_1 = _checked_unit(F_1, tol)
    return np.clip(2.0 - 2.0 * F_t @ F_1.T, 0.0, 4.0)


def _checked_unit(F, tol):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = np.linalg.norm(F, axis=1)
    if np.any(n == 0):
        raise ZeroFeature(f"{int((n == 0).sum())} feature rows have zero norm")
    if np.any(np.abs(n - 1.0) > tol):
        F = F / n[:, None]
    return F


def _lse(a, axis):
    # scipy.special.logsumexp does the same but carries ~100 us of dispatch
    # overhead per call, which dominates on matrices this small
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def sinkhorn_log(M, slack_cost: float = 1.0, iters: int = 5, *,
                 temperature: float = 1.0) -> SoftAssignment:
    """Entropic balancing of ``exp(-M / temperature)`` with slack.

    Each round normalizes the non-slack rows (over all columns, slack
    included) and then the non-slack columns (over all rows). The slack row
    and column are never normalized along their own length, so they absorb
    unmatched mass. ``marginal_error[k]`` is the largest deviation of a
    non-slack row or column sum from 1 after round ``k``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise ValueError("cost matrix must be finite")
    n, m = M.shape
    L = np.full((n + 1, m + 1), -slack_cost / temperature)
    L[:n, :m] = -M / temperature
    errs = []
    for _ in range(iters):
        L[:n, :] -= _lse(L[:n, :], 1)
        L[:, :m] -= _lse(L[:, :m], 0)
        S = np.exp(L)
        errs.append(float(max(np.abs(S[:n, :].sum(1) - 1).max(initial=0.0),
                              np.abs(S[:, :m].sum(0) - 1).max(initial=0.0))))
    return SoftAssignment(np.exp(L), iters, slack_cost, temperature, marginal_error=errs)


def inlier_score(S: SoftAssignment) -> float:
    """Fraction of marginal mass sent to slack, averaged over both sides.

    0 when every non-slack row and column is fully matched, 1 when all mass
    sits in the slack row/column.
    """
    core = S.core
    n, m = core.shape
    return float((n + m - 2.0 * core.sum()) / (n + m))


def soft_correspondences(S: SoftAssignment, P_t, P_1, v_max: float, elapsed: float):
    """Soft targets and weights for source pillars.

    The support mask keeps pairs closer than ``v_max * elapsed``. A row's
    weight is its masked mass; its target is the masked row, renormalized,
    applied to ``P_1``. Rows with empty support get weight 0 and their own
    position as target. Returns ``(targets, weights, n_empty)``.
    """
    P_t = np.asarray(P_t, dtype=float)
    P_1 = np.asarray(P_1, dtype=float)
    radius = v_max * elapsed
    support = cdist(P_t, P_1) < radius
    S.support = support
    masked = np.where(support, S.core, 0.0)
    w = masked.sum(axis=1)
    empty = w <= 0
    denom = np.where(empty, 1.0, w)
    targets = (masked / denom[:, None]) @ P_1
    targets[empty] = P_t[empty]
    w = np.where(empty, 0.0, w)
    return targets, w, int(empty.sum())


def _background_cells(grid: PillarGrid, fg, tau):
    idx, cen, feat = grid.occupied()
    if fg is None:
        keep = np.ones(len(idx), dtype=bool)
    else:
        keep = np.asarray(fg, dtype=float).ravel()[idx] < tau
    return idx[keep], cen[keep], feat[keep]


def _sample(n, k, rng):
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def estimate_ego_motion(grid_t: PillarGrid, grid_1: PillarGrid, *, embed, elapsed: float,
                        fg_t=None, fg_1=None, n_ego: int = 1024, tau: float = 0.5,
                        iters: int = 5, slack_cost: float = 1.0, temperature: float = 1.0,
                        v_max: float = WAYMO_VMAX, rng=None):
    """Estimate the transform mapping frame ``t`` onto the target frame.

    ``fg_t`` / ``fg_1`` are per-cell foreground scores shaped like the grids
    (``None`` = all background). ``embed`` maps pooled cell features to unit
    matching features. Returns ``(transform, diagnostics)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, cen_t, feat_t = _background_cells(grid_t, fg_t, tau)
    _, cen_1, feat_1 = _background_cells(grid_1, fg_1, tau)
    if len(cen_t) < 3 or len(cen_1) < 3:
        raise InsufficientBackground(
            f"need >= 3 background pillars per frame, got {len(cen_t)} and {len(cen_1)}")
    st = _sample(len(cen_t), n_ego, rng)
    s1 = _sample(len(cen_1), n_ego, rng)
    P_t, P_1 = cen_t[st], cen_1[s1]
    M = build_cost_matrix(embed(feat_t[st]), embed(feat_1[s1]))
    S = sinkhorn_log(M, slack_cost, iters, temperature=temperature)
    targets, w, n_empty = soft_correspondences(S, P_t, P_1, v_max, elapsed)
    T = kabsch_weighted(P_t, targets, w)
    resid = np.linalg.norm(apply_transform(T, P_t) - targets, axis=1)
    diag = {
        "n_source": len(P_t),
        "n_target": len(P_1),
        "n_empty_support": n_empty,
        "inlier_score": inlier_score(S),
        "mean_residual": float((w * resid).sum() / max(w.sum(), 1e-300)),
        "marginal_error": S.marginal_error[-1],
    }
    return T, diag
