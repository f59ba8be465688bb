"""Scene-flow and instance-association metrics.

Flow metrics are computed per source frame over the masked points and then
averaged over frames; ``per_frame=False`` pools all points instead. The
relative error divides by ``max(|v_gt|, 1e-9)``. Medians are lower medians
taken by exact selection.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import FlowField
from .errors import EmptyInput, EmptyMask, NoGtClusters

REL_FLOOR = 1e-9
IOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class FlowMetrics:
    epe_avg: float
    epe_med: float
    acc_s: float        # percent
    acc_r: float
    outliers: float
    routliers: float
    n_points: int

    def to_dict(self):
        return asdict(self)


def lower_median(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if len(x) == 0:
        raise EmptyInput("median of an empty set")
    k = (len(x) - 1) // 2
    return float(np.partition(x, k)[k])


def _frames(x):
    if isinstance(x, FlowField):
        return [np.asarray(v, dtype=float) for v in x.vectors[1:]]
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [np.asarray(x, dtype=float)]
    return [np.asarray(v, dtype=float).reshape(-1, 3) for v in x]


def point_errors(pred, gt):
    """Per-point end-point error and relative error."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    e = np.linalg.norm(pred - gt, axis=1)
    rel = e / np.maximum(np.linalg.norm(gt, axis=1), REL_FLOOR)
    return e, rel


def _summary(e, rel):
    return np.array([
        e.mean(),
        lower_median(e),
        100.0 * np.mean((e < 0.05) | (rel < 0.05)),
        100.0 * np.mean((e < 0.10) | (rel < 0.10)),
        100.0 * np.mean((e > 0.30) | (rel > 0.10)),
        100.0 * np.mean((e > 0.30) & (rel > 0.30)),
    ])


def flow_metrics(pred, gt, mask=None, *, per_frame: bool = True) -> FlowMetrics:
    """EPE, AccS, AccR, Outliers and ROutliers over masked points.

    ``pred`` and ``gt`` are :class:`FlowField` objects (source frames only
    are scored) or lists of per-frame ``(n, 3)`` arrays; ``mask`` is a list
    of boolean arrays aligned with them. Frames with no masked point are
    skipped.
    """
    P, G = _frames(pred), _frames(gt)
    if len(P) != len(G) or any(p.shape != g.shape for p, g in zip(P, G)):
        raise ValueError("prediction and ground truth shapes differ")
    if mask is None:
        M = [np.ones(len(g), dtype=bool) for g in G]
    else:
        if isinstance(mask, np.ndarray) and mask.ndim == 1 and len(G) == 1:
            mask = [mask]
        M = [np.asarray(m, dtype=bool) for m in mask]
        if len(M) != len(G) or any(len(m) != len(g) for m, g in zip(M, G)):
            raise ValueError("mask shape differs from flow shape")
    errs = [point_errors(p[m], g[m]) for p, g, m in zip(P, G, M) if m.any()]
    n = int(sum(len(e) for e, _ in errs))
    if n == 0:
        raise EmptyMask("no points selected for evaluation")
    if per_frame:
        vals = np.mean([_summary(e, r) for e, r in errs], axis=0)
    else:
        vals = _summary(np.concatenate([e for e, _ in errs]), np.concatenate([r for _, r in errs]))
    return FlowMetrics(*[float(v) for v in vals], n_points=n)


def average_metrics(items) -> FlowMetrics:
    """Unweighted mean over scenes (per-scene averaging)."""
    items = list(items)
    if not items:
        raise EmptyInput("no scenes to average")
    keys = ["epe_avg", "epe_med", "acc_s", "acc_r", "outliers", "routliers"]
    vals = {k: float(np.mean([getattr(m, k) for m in items])) for k in keys}
    return FlowMetrics(**vals, n_points=int(sum(m.n_points for m in items)))


@dataclass
class AssocMetrics:
    wcov: float
    recall: dict = field(default_factory=dict)       # threshold -> value
    precision: dict = field(default_factory=dict)
    n_gt: int = 0
    n_pred: int = 0

    def to_dict(self):
        return {"wcov": self.wcov, "n_gt": self.n_gt, "n_pred": self.n_pred,
                "recall": {f"{k:g}": v for k, v in self.recall.items()},
                "precision": {f"{k:g}": v for k, v in self.precision.items()}}


def _pool(labels):
    if hasattr(labels, "labels"):
        labels = labels.labels
    if isinstance(labels, np.ndarray):
        return labels.ravel().astype(np.int64)
    return np.concatenate([np.asarray(l, dtype=np.int64).ravel() for l in labels]) if len(labels) else \
        np.zeros(0, dtype=np.int64)


def iou_matrix(pred, gt):
    """IoU between every ground-truth cluster (rows) and predicted cluster
    (columns); id 0 is never a cluster. Returns ``(iou, gt_ids, pred_ids)``."""
    p, g = _pool(pred), _pool(gt)
    if p.shape != g.shape:
        raise ValueError("labelings cover different point sets")
    gids = np.unique(g[g != 0])
    pids = np.unique(p[p != 0])
    gi = np.searchsorted(gids, g)
    pj = np.searchsorted(pids, p)
    both = (g != 0) & (p != 0)
    inter = np.zeros((len(gids), len(pids)))
    np.add.at(inter, (gi[both], pj[both]), 1.0)
    gsize = np.array([(g == k).sum() for k in gids], dtype=float)
    psize = np.array([(p == k).sum() for k in pids], dtype=float)
    union = gsize[:, None] + psize[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return iou, gids, pids


def assoc_metrics(pred, gt, thresholds=IOU_THRESHOLDS) -> AssocMetrics:
    """Size-weighted coverage plus recall / precision at IoU thresholds.

    WCov is ``sum_i w_i max_j IoU(G_i, O_j)`` with ``w_i = |G_i| / sum |G|``.
    A cluster counts as recovered when its best IoU is at least the
    threshold.
    """
    iou, gids, pids = iou_matrix(pred, gt)
    if len(gids) == 0:
        raise NoGtClusters("ground truth has no clusters")
    g = _pool(gt)
    sizes = np.array([(g == k).sum() for k in gids], dtype=float)
    best_g = iou.max(axis=1) if len(pids) else np.zeros(len(gids))
    best_p = iou.max(axis=0) if len(pids) else np.zeros(0)
    wcov = float(sizes @ best_g / sizes.sum())
    rec = {float(t): float(np.mean(best_g >= t)) for t in thresholds}
    prec = {float(t): (float(np.mean(best_p >= t)) if len(pids) else 0.0) for t in thresholds}
    return AssocMetrics(wcov, rec, prec, len(gids), len(pids))


class ECDF:
    """Empirical CDF with strict counting: ``F(x) = |{v < x}| / n``."""

    def __init__(self, values):
        v = np.sort(np.asarray(values, dtype=float).ravel())
        if len(v) == 0:
            raise EmptyInput("ECDF of an empty set")
        self.values = v

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.searchsorted(self.values, x, side="left") / len(self.values)

    def table(self):
        """Two columns ``(x, F(x))`` evaluated at each distinct value and
        just past the largest one."""
        xs = np.unique(self.values)
        xs = np.r_[xs, np.nextafter(xs[-1], np.inf)]
        return np.c_[xs, self(xs)]


def ecdf(values) -> ECDF:
    return ECDF(values)


def eval_region_mask(points, half_extent: float = 32.0, ground_z: float | None = None) -> np.ndarray:
    """Points inside the ``2*half_extent`` square (inclusive) around the
    sensor and, when ``ground_z`` is given, strictly above it."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    m = (np.abs(p[:, 0]) <= half_extent) & (np.abs(p[:, 1]) <= half_extent)
    if ground_z is not None:
        m &= p[:, 2] > ground_z
    return m


def format_report(rows: dict) -> str:
    """Flat ``key = value`` text for a dict of :class:`FlowMetrics` (or
    dicts), one section per entry."""
    lines = []
    for name, m in rows.items():
        d = m.to_dict() if hasattr(m, "to_dict") else dict(m)
        lines.append(f"[{name}]")
        for k, v in d.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    lines.append(f"{k}@{kk} = {vv:.6g}")
            elif isinstance(v, float):
                lines.append(f"{k} = {v:.6g}")
            else:
                lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def to_json(rows: dict) -> str:
    return json.dumps({k: (m.to_dict() if hasattr(m, "to_dict") else m) for k, m in rows.items()},
                      indent=2, sort_keys=True)
