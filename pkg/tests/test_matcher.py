import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_transform
from rigid_accum.core import RigidTransform
from rigid_accum.errors import InsufficientBackground, ZeroFeature
from rigid_accum.grid import make_featurizer, pillarize
from rigid_accum.matcher import (SoftAssignment, build_cost_matrix, estimate_ego_motion, inlier_score,
                                 sinkhorn_log, soft_correspondences)

# pipeline matcher settings; the spec-level defaults (slack 1, temperature 1)
# give a soft assignment too blurred for centimetre registration
SLACK, TEMP = 0.5, 0.05


def _unit(rng, n, d=8):
    F = rng.normal(size=(n, d))
    return F / np.linalg.norm(F, axis=1, keepdims=True)


def test_cost_identical_and_antipodal():
    f = np.array([[0.6, 0.8, 0.0]])
    assert build_cost_matrix(f, f)[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert build_cost_matrix(f, -f)[0, 0] == pytest.approx(4.0)


def test_cost_matches_dot_oracle(rng):
    A, B = _unit(rng, 6), _unit(rng, 9)
    M = build_cost_matrix(A, B)
    for i in range(6):
        for j in range(9):
            assert M[i, j] == pytest.approx(2 - 2 * sum(A[i, k] * B[j, k] for k in range(8)), abs=1e-12)


def test_cost_renormalizes_and_rejects_zero(rng):
    A = _unit(rng, 3)
    assert np.allclose(build_cost_matrix(3 * A, A), build_cost_matrix(A, A), atol=1e-12)
    with pytest.raises(ZeroFeature):
        build_cost_matrix(np.zeros((1, 3)), A[:, :3])


def test_sinkhorn_single_entry_large_slack():
    S = sinkhorn_log(np.zeros((1, 1)), slack_cost=50.0, iters=5)
    assert S.core[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_sinkhorn_uniform_symmetry():
    S = sinkhorn_log(np.full((5, 5), 0.7), slack_cost=0.7, iters=20)
    assert np.ptp(S.core) < 1e-15


def _naive(M, slack, iters):
    n, m = M.shape
    K = np.full((n + 1, m + 1), np.exp(-slack))
    K[:n, :m] = np.exp(-M)
    for _ in range(iters):
        for i in range(n):
            K[i, :] /= K[i, :].sum()
        for j in range(m):
            K[:, j] /= K[:, j].sum()
    return K


def test_sinkhorn_matches_naive_oracle():
    M = np.array([[0.0, 10.0], [10.0, 0.0]])
    S = sinkhorn_log(M, 1.0, 100)
    assert np.abs(S.matrix - _naive(M, 1.0, 100)).max() < 1e-8
    assert S.core[0, 0] > 1e3 * S.core[0, 1]


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12))
def test_sinkhorn_matches_naive_on_random(seed, n, m):
    M = np.random.default_rng(seed).uniform(0, 4, (n, m))
    S = sinkhorn_log(M, 1.0, 7)
    assert np.abs(S.matrix - _naive(M, 1.0, 7)).max() < 1e-10
    assert np.all(S.matrix >= 0) and np.all(np.isfinite(S.matrix))


def test_sinkhorn_log_space_survives_extreme_costs():
    S = sinkhorn_log(np.array([[0.0, 4.0], [4.0, 0.0]]), 2.0, 50, temperature=1e-3)
    assert np.all(np.isfinite(S.matrix))
    assert np.abs(S.row_sums() - 1).max() < 1e-9


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(ValueError):
        sinkhorn_log(np.zeros((2, 2)), iters=0)
    with pytest.raises(ValueError):
        sinkhorn_log(np.array([[np.nan]]))


def test_inlier_score_cases():
    n = 4
    P = np.zeros((n + 1, n + 1))
    P[:n, :n] = np.eye(n)
    assert inlier_score(SoftAssignment(P, 1, 1.0)) == 0.0
    A = np.zeros((n + 1, n + 1))
    A[:n, n] = 1
    A[n, :n] = 1
    assert inlier_score(SoftAssignment(A, 1, 1.0)) == 1.0
    H = 0.5 * P + 0.5 * A
    assert inlier_score(SoftAssignment(H, 1, 1.0)) == pytest.approx(0.5)


def test_soft_correspondences_permutation():
    rng = np.random.default_rng(1)
    P1 = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    Pt = P1[perm] + 0.01
    S = np.zeros((6, 6))
    S[np.arange(5), perm] = 1
    tgt, w, n_empty = soft_correspondences(SoftAssignment(S, 1, 1.0), Pt, P1, 30.0, 1.0)
    assert np.allclose(tgt, P1[perm]) and np.allclose(w, 1) and n_empty == 0


def test_soft_correspondences_far_pillar_gets_zero_weight():
    P1 = np.zeros((3, 3)) + [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    Pt = P1.copy()
    Pt[2] = [100.0, 0, 0]
    S = np.full((4, 4), 0.25)
    tgt, w, n_empty = soft_correspondences(SoftAssignment(S, 1, 1.0), Pt, P1, 10.0, 1.0)
    assert w[2] == 0 and np.array_equal(tgt[2], Pt[2]) and n_empty == 1


def test_soft_correspondences_loop_oracle():
    rng = np.random.default_rng(5)
    Pt, P1 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    S = rng.uniform(size=(6, 6))
    tgt, w, _ = soft_correspondences(SoftAssignment(S, 1, 1.0), Pt, P1, 1.5, 1.0)
    for l in range(5):
        num, den = np.zeros(3), 0.0
        for m in range(5):
            if np.linalg.norm(Pt[l] - P1[m]) < 1.5:
                num += S[l, m] * P1[m]
                den += S[l, m]
        assert w[l] == pytest.approx(den, abs=1e-12)
        if den > 0:
            assert np.abs(tgt[l] - num / den).max() < 1e-10


# --- ego-motion on sparse scenes: one point per pillar, so every source
# pillar has an exact counterpart and oracle features are exact


EXT = (-32.0, 32.0, -32.0, 32.0)
PS = (0.25, 0.25, 8.0)
FZ = make_featurizer("oracle-position")


def _lattice(rng, n=800):
    g = np.stack(np.meshgrid(np.arange(-20, 20, 1.0), np.arange(-20, 20, 1.0)), -1).reshape(-1, 2)
    g = g[rng.choice(len(g), n, replace=False)] + rng.uniform(-0.2, 0.2, (n, 2))
    return np.c_[g, rng.uniform(-1, 2, n)]


def _ego(X_t, target, fg_t=None, seed=1):
    g1 = pillarize(target, EXT, PS, FZ, target=target)
    gt = pillarize(X_t, EXT, PS, FZ, target=target)
    return estimate_ego_motion(gt, g1, embed=FZ.embed, elapsed=0.5, fg_t=fg_t, slack_cost=SLACK,
                               temperature=TEMP, rng=np.random.default_rng(seed))


def _small_motion(rng):
    return RigidTransform.from_yaw(rng.uniform(-0.1, 0.1), [*rng.uniform(-2, 2, 2), 0.1])


def test_ego_identity():
    X = _lattice(np.random.default_rng(0))
    T, diag = _ego(X, X)
    assert T.allclose(RigidTransform.identity(), 1e-6)
    assert diag["inlier_score"] < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_ego_recovers_known_transform(seed):
    rng = np.random.default_rng(seed)
    X1 = _lattice(rng)
    T = _small_motion(rng)
    est, _ = _ego(T.inverse().apply(X1), X1)
    assert np.linalg.norm(est.t - T.t) < 1e-3


def test_ego_ignores_foreground_pillars():
    rng = np.random.default_rng(7)
    X1 = _lattice(rng)
    T = _small_motion(rng)
    Xt = T.inverse().apply(X1)
    # replace 20% of the source pillars by object points whose oracle targets are elsewhere
    k = len(Xt) // 5
    targets = X1.copy()
    targets[:k] += rng.uniform(-3, 3, (k, 3))
    g1 = pillarize(X1, EXT, PS, FZ, target=X1)
    gt = pillarize(Xt, EXT, PS, FZ, target=targets)
    fg = np.zeros(gt.counts.size)
    fg[gt.point_cell[:k]] = 1.0
    kw = dict(embed=FZ.embed, elapsed=0.5, slack_cost=SLACK, temperature=TEMP)
    clean, _ = estimate_ego_motion(gt, g1, fg_t=fg.reshape(gt.shape), rng=np.random.default_rng(1), **kw)
    dirty, _ = estimate_ego_motion(gt, g1, rng=np.random.default_rng(1), **kw)
    assert np.linalg.norm(clean.t - T.t) < 1e-3
    assert np.linalg.norm(dirty.t - T.t) > 1e-3      # the mask is what saves it


@pytest.mark.parametrize("seed", range(3))
def test_ego_equivariance(seed):
    rng = np.random.default_rng(seed)
    X1 = _lattice(rng)
    T = _small_motion(rng)
    Xt = T.inverse().apply(X1)
    G = _small_motion(rng)
    a, _ = _ego(Xt, X1)
    b, _ = _ego(G.apply(Xt), X1)
    assert b.allclose(a @ G.inverse(), 1e-6)


def test_ego_insufficient_background():
    X = _lattice(np.random.default_rng(0), 20)
    g = pillarize(X, EXT, PS, FZ, target=X)
    fg = np.ones(g.shape)
    with pytest.raises(InsufficientBackground):
        estimate_ego_motion(g, g, embed=FZ.embed, elapsed=0.1, fg_t=fg)


def test_ego_deterministic_for_seed():
    rng = np.random.default_rng(3)
    X1 = np.c_[rng.uniform(-20, 20, (30000, 2)), rng.uniform(-1, 2, 30000)]
    Xt = _small_motion(rng).inverse().apply(X1)
    a, _ = _ego(Xt, X1, seed=9)
    b, _ = _ego(Xt, X1, seed=9)
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
