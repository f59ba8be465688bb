import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigid_accum.core import FlowField
from rigid_accum.errors import EmptyInput, EmptyMask, NoGtClusters
from rigid_accum.metrics import (ECDF, assoc_metrics, average_metrics, ecdf, eval_region_mask, flow_metrics,
                                 format_report, iou_matrix, lower_median, to_json)


def flow_oracle(pred, gt):
    """Per-point loop straight from the metric definitions."""
    e, rel = [], []
    for p, g in zip(pred, gt):
        ei = float(np.sqrt(sum((p[k] - g[k]) ** 2 for k in range(3))))
        gn = float(np.sqrt(sum(g[k] ** 2 for k in range(3))))
        e.append(ei)
        rel.append(ei / max(gn, 1e-9))
    n = len(e)
    srt = sorted(e)
    return dict(
        epe_avg=sum(e) / n,
        epe_med=srt[(n - 1) // 2],
        acc_s=100 * sum(1 for a, r in zip(e, rel) if a < 0.05 or r < 0.05) / n,
        acc_r=100 * sum(1 for a, r in zip(e, rel) if a < 0.10 or r < 0.10) / n,
        outliers=100 * sum(1 for a, r in zip(e, rel) if a > 0.30 or r > 0.10) / n,
        routliers=100 * sum(1 for a, r in zip(e, rel) if a > 0.30 and r > 0.30) / n,
    )


def test_perfect_prediction():
    g = np.random.default_rng(0).normal(size=(30, 3))
    m = flow_metrics([g], [g])
    assert m.epe_avg == 0 and m.acc_s == 100 and m.routliers == 0 and m.outliers == 0


def test_hand_thresholds():
    m = flow_metrics([np.array([[1.4, 0, 0]])], [np.array([[1.0, 0, 0]])])
    assert m.epe_avg == pytest.approx(0.4)
    assert m.outliers == 100 and m.routliers == 100 and m.acc_r == 0 and m.acc_s == 0


@pytest.mark.parametrize("seed", range(5))
def test_flow_metrics_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(scale=0.5, size=(100, 3))
    pred = gt + rng.normal(scale=rng.uniform(0.01, 0.4), size=(100, 3))
    got = flow_metrics([pred], [gt]).to_dict()
    for k, v in flow_oracle(pred, gt).items():
        assert got[k] == pytest.approx(v, abs=1e-10)


def test_frames_are_averaged_not_pooled():
    rng = np.random.default_rng(1)
    g1, g2 = rng.normal(size=(10, 3)), rng.normal(size=(40, 3))
    p1, p2 = g1 + 0.1, g2 + 0.5
    per = flow_metrics([p1, p2], [g1, g2])
    o1, o2 = flow_oracle(p1, g1), flow_oracle(p2, g2)
    assert per.epe_avg == pytest.approx((o1["epe_avg"] + o2["epe_avg"]) / 2, abs=1e-12)
    pooled = flow_metrics([p1, p2], [g1, g2], per_frame=False)
    assert pooled.epe_avg == pytest.approx(flow_oracle(np.r_[p1, p2], np.r_[g1, g2])["epe_avg"], abs=1e-12)


def test_flowfield_skips_target_frame_and_masks():
    g = [np.zeros((3, 3)), np.ones((4, 3))]
    p = [np.full((3, 3), 9.0), np.ones((4, 3))]
    assert flow_metrics(FlowField(p), FlowField(g)).epe_avg == 0
    with pytest.raises(EmptyMask):
        flow_metrics([p[1]], [g[1]], [np.zeros(4, bool)])
    with pytest.raises(ValueError):
        flow_metrics([p[1]], [g[0]])


@settings(max_examples=100)
@given(st.integers(0, 2**31))
def test_acc_strict_nests_in_acc_relaxed(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(scale=rng.uniform(0.01, 2), size=(20, 3))
    p = g + rng.normal(scale=rng.uniform(0.001, 1), size=(20, 3))
    m = flow_metrics([p], [g])
    assert m.acc_s <= m.acc_r
    for v in (m.acc_s, m.acc_r, m.outliers, m.routliers):
        assert 0 <= v <= 100


def test_lower_median():
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([5]) == 5
    with pytest.raises(EmptyInput):
        lower_median([])


def assoc_oracle(pred, gt, thresholds):
    gids = sorted(set(gt) - {0})
    pids = sorted(set(pred) - {0})

    def iou(a, b):
        A = {i for i, v in enumerate(gt) if v == a}
        B = {i for i, v in enumerate(pred) if v == b}
        return len(A & B) / len(A | B)

    sizes = [sum(1 for v in gt if v == a) for a in gids]
    best_g = [max((iou(a, b) for b in pids), default=0.0) for a in gids]
    best_p = [max((iou(a, b) for a in gids), default=0.0) for b in pids]
    wcov = sum(s * b for s, b in zip(sizes, best_g)) / sum(sizes)
    rec = {t: sum(b >= t for b in best_g) / len(gids) for t in thresholds}
    prec = {t: (sum(b >= t for b in best_p) / len(pids) if pids else 0.0) for t in thresholds}
    return wcov, rec, prec


def test_identical_clusterings():
    lab = np.array([0, 1, 1, 2, 2, 2, 3])
    m = assoc_metrics(lab, lab)
    assert m.wcov == 1.0
    assert all(v == 1.0 for v in m.recall.values()) and all(v == 1.0 for v in m.precision.values())


def test_merge_two_equal_clusters():
    gt = np.array([1, 1, 2, 2])
    m = assoc_metrics(np.array([1, 1, 1, 1]), gt)
    assert m.wcov == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(10))
def test_assoc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 5, 50)
    gt[0] = 1
    pred = rng.integers(0, 6, 50)
    th = (0.1, 0.3, 0.5)
    m = assoc_metrics(pred, gt, th)
    w, r, p = assoc_oracle(list(pred), list(gt), th)
    assert m.wcov == pytest.approx(w, abs=1e-12)
    for t in th:
        assert m.recall[t] == pytest.approx(r[t], abs=1e-12)
        assert m.precision[t] == pytest.approx(p[t], abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_wcov_one_iff_identical_up_to_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(1, 4, 30)
    perm = rng.permutation(np.arange(1, 4)) + 10
    relabeled = perm[gt - 1]
    assert assoc_metrics(relabeled, gt).wcov == pytest.approx(1.0, abs=1e-15)
    other = relabeled.copy()
    other[0] = 99
    assert assoc_metrics(other, gt).wcov < 1.0


def test_assoc_edge_cases():
    with pytest.raises(NoGtClusters):
        assoc_metrics(np.array([1, 1]), np.array([0, 0]))
    m = assoc_metrics(np.zeros(3, int), np.array([1, 1, 0]))
    assert m.wcov == 0 and m.precision[0.5] == 0 and m.n_pred == 0
    # lists of per-frame arrays are pooled
    assert assoc_metrics([np.array([1]), np.array([1])], [np.array([1]), np.array([1])]).wcov == 1.0
    iou, g, p = iou_matrix(np.array([1, 2]), np.array([1, 1]))
    assert iou.shape == (1, 2) and np.allclose(iou, 0.5)


def test_ecdf_examples():
    F = ecdf([1, 2, 3])
    assert F(1) == 0 and F(2.5) == pytest.approx(2 / 3) and F(100) == 1
    with pytest.raises(EmptyInput):
        ECDF([])


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50))
def test_ecdf_monotone(vals):
    F = ECDF(vals)
    xs = np.linspace(-120, 120, 97)
    ys = F(xs)
    assert np.all(np.diff(ys) >= 0) and ys.min() >= 0 and ys.max() <= 1
    assert F(min(vals)) == 0
    tab = F.table()
    assert np.all(np.diff(tab[:, 0]) > 0) and np.all(np.diff(tab[:, 1]) >= 0) and tab[-1, 1] == 1


def test_region_mask():
    pts = np.array([[0, 0, 0.5], [33, 0, 1], [32.0, -32.0, 1], [1, 1, -0.2]])
    assert list(eval_region_mask(pts)) == [True, False, True, True]
    assert list(eval_region_mask(pts, ground_z=0.0)) == [True, False, True, False]


def test_reports():
    m = flow_metrics([np.ones((3, 3))], [np.ones((3, 3))])
    txt = format_report({"static": m})
    assert "[static]" in txt and "epe_avg = 0" in txt
    d = json.loads(to_json({"static": m}))
    assert d["static"]["n_points"] == 3
    avg = average_metrics([m, m])
    assert avg.epe_avg == 0 and avg.n_points == 6
