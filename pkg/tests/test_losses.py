import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_transform
from rigid_accum.core import RigidTransform
from rigid_accum.errors import EmptyInput, NonDifferentiable, ZeroQuaternion
from rigid_accum.losses import (class_weights, grad_check, inlier_loss, lovasz_softmax_binary, offset_loss,
                                pose_loss, total_loss, trans_loss, weighted_bce)
from rigid_accum.matcher import sinkhorn_log


# --- weighted BCE

def bce_oracle(p, y, w_max=50.0):
    n = len(y)
    n_pos = sum(y)
    w_pos = min(np.sqrt(n / n_pos), w_max)
    w_neg = min(np.sqrt(n / (n - n_pos)), w_max)
    s = 0.0
    for pi, yi in zip(p, y):
        s -= (w_pos * np.log(pi)) if yi == 1 else (w_neg * np.log(1 - pi))
    return s / n


def test_bce_confident_predictions_near_zero():
    assert weighted_bce([1 - 1e-7, 1e-7], [1, 0]).value < 1e-5


def test_bce_balanced_weights():
    assert class_weights([1, 0, 1, 0]) == pytest.approx((np.sqrt(2), np.sqrt(2)))
    assert class_weights([1] + [0] * 9999)[0] == 50.0


def test_bce_four_sample_oracle():
    p, y = [0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]
    lv = weighted_bce(p, y)
    assert lv.value == pytest.approx(bce_oracle(p, y), abs=1e-10)
    assert grad_check(lambda x: weighted_bce(x, y), p) < 1e-5


def test_bce_errors():
    with pytest.raises(EmptyInput):
        weighted_bce([], [])
    with pytest.raises(ValueError):
        weighted_bce([0.5], [1, 0])


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_bce_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, 20)
    y = rng.integers(0, 2, 20)
    perm = rng.permutation(20)
    assert weighted_bce(p, y).value == pytest.approx(weighted_bce(p[perm], y[perm]).value, abs=1e-13)


# --- Lovasz

def jaccard_loss(S, pos):
    S = set(S)
    return 1.0 - len(pos - S) / len(pos | S)


def lovasz_oracle(x, y):
    m = np.maximum(1 - x * y, 0)
    pi = sorted(range(len(x)), key=lambda i: -m[i])
    pos = {i for i in range(len(x)) if y[i] == 1}
    total = 0.0
    for k in range(len(pi)):
        total += m[pi[k]] * (jaccard_loss(pi[:k + 1], pos) - jaccard_loss(pi[:k], pos))
    return total


def test_lovasz_perfect_margin():
    assert lovasz_softmax_binary([2.0, -3.0], [1, -1]).value == 0.0


def test_lovasz_single_positive():
    assert lovasz_softmax_binary([0.3], [1]).value == pytest.approx(0.7)


def test_lovasz_five_sample_oracle():
    x = np.array([0.3, -0.8, 1.7, 0.05, -0.2])
    y = np.array([1, -1, 1, -1, 1])
    lv = lovasz_softmax_binary(x, y)
    assert lv.value == pytest.approx(lovasz_oracle(x, y), abs=1e-10)
    assert grad_check(lambda v: lovasz_softmax_binary(v, y), x) < 1e-4


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_lovasz_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = rng.choice([-1, 1], n)
    y[0] = 1
    assert lovasz_softmax_binary(x, y).value == pytest.approx(lovasz_oracle(x, y), abs=1e-10)


def test_lovasz_no_positives_and_kinks():
    lv = lovasz_softmax_binary([0.1, 0.2], [-1, -1])
    assert lv.value == 0 and lv.flags["no_positives"]
    with pytest.raises(NonDifferentiable):
        grad_check(lambda v: lovasz_softmax_binary(v, [1, 1]), [0.5, 0.5])
    with pytest.raises(ValueError):
        lovasz_softmax_binary([0.1], [0])


# --- offsets

def test_offset_zero_and_antiparallel():
    d = np.array([[1.0, -2.0, 0.5]])
    assert offset_loss(d, d).value == pytest.approx(0.0, abs=1e-15)
    assert offset_loss(-d, d).value == pytest.approx(2 * np.abs(d).sum() + 2)


def test_offset_random_formula(rng):
    d, g = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    want = np.mean([np.abs(a - b).sum() + 1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b)
                    for a, b in zip(d, g)])
    assert offset_loss(d, g).value == pytest.approx(want, abs=1e-12)
    assert grad_check(lambda x: offset_loss(x.reshape(-1, 3), g), d) < 1e-5


def test_offset_zero_norm_conventions():
    g = np.array([[1.0, 0, 0]])
    lv = offset_loss(np.zeros((1, 3)), g)
    assert lv.value == pytest.approx(1.0 + 1.0)       # L1 distance 1, directional worst case 1
    z = offset_loss(np.array([[0.5, 0, 0]]), np.zeros((1, 3)))
    assert z.value == pytest.approx(0.5)               # no direction to compare against


# --- pose

def test_pose_exact_is_zero():
    q = RigidTransform.from_yaw(0.4).rotation
    lv = pose_loss([q], [[1, 2, 3]], [q], [[1, 2, 3]])
    assert lv.value == 0.0


def test_pose_scale_and_sign_invariance(rng):
    T = random_transform(rng)
    q, t = T.rotation, T.translation
    a = pose_loss([2 * q], [t + [0.3, 0, 0]], [q], [t])
    assert a.value == pytest.approx(0.3, abs=1e-15)
    b = pose_loss([q], [t], [-q], [t])
    assert b.value == pytest.approx(0.0, abs=1e-15)
    qg = random_transform(rng).rotation
    base = pose_loss([q], [t], [qg], [t]).value
    for c in (0.25, 2.0, 8.0):       # power-of-two scales leave q/|q| bit-identical
        assert pose_loss([c * q], [t], [qg], [t]).value == base
    for c in (0.1, 3.0, 17.0):
        assert pose_loss([c * q], [t], [qg], [t]).value == pytest.approx(base, abs=1e-12)


def test_pose_lambda_and_errors(rng):
    q = rng.normal(size=(2, 4))
    qg = rng.normal(size=(2, 4))
    t = np.zeros((2, 3))
    v1 = pose_loss(q, t, qg, t, lam=1.0).value
    assert pose_loss(q, t, qg, t).value == pytest.approx(50 * v1)
    with pytest.raises(ZeroQuaternion):
        pose_loss(np.zeros((1, 4)), [[0, 0, 0]], [[1, 0, 0, 0]], [[0, 0, 0]])


def test_pose_gradient(rng):
    q, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    qg, tg = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))

    def f(x):
        return pose_loss(x[:12].reshape(3, 4), x[12:].reshape(3, 3), qg, tg)

    assert grad_check(f, np.r_[q.ravel(), t.ravel()]) < 1e-5


# --- pillar transform loss

def test_trans_loss_cases(rng):
    P = rng.normal(size=(10, 3))
    T = random_transform(rng)
    assert trans_loss(T, T, P).value == pytest.approx(0.0, abs=1e-14)
    assert trans_loss(RigidTransform.from_translation((1, 0, 0)), RigidTransform(), P).value == pytest.approx(1.0)


def test_trans_loss_oracle(rng):
    P = rng.normal(size=(10, 3))
    A, B = random_transform(rng), random_transform(rng)
    want = sum(np.abs(A.R @ p + A.t - B.R @ p - B.t).sum() for p in P) / 10
    assert trans_loss(A, B, P).value == pytest.approx(want, abs=1e-10)
    perm = rng.permutation(10)
    assert trans_loss(A, B, P[perm]).value == pytest.approx(trans_loss(A, B, P).value, abs=1e-13)


def test_trans_loss_gradient(rng):
    P = rng.normal(size=(11, 3))
    Tg = random_transform(rng)
    x0 = np.r_[rng.normal(size=4), rng.normal(size=3)]
    assert grad_check(lambda x: trans_loss((x[:4], x[4:]), Tg, P), x0) < 1e-4


# --- harness and composition

def test_grad_check_quadratic():
    from rigid_accum.losses import LossValue
    A = np.array([[3.0, 1.0], [1.0, 2.0]])

    def f(x):
        return LossValue(float(x @ A @ x), 2 * A @ x)

    assert grad_check(f, [0.3, -1.2]) < 1e-9


def test_losses_nonnegative(rng):
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, 8)
        y = rng.integers(0, 2, 8)
        assert weighted_bce(p, y).value >= 0
        assert lovasz_softmax_binary(rng.normal(size=8), np.r_[1, rng.choice([-1, 1], 7)]).value >= 0
        assert offset_loss(rng.normal(size=(4, 3)), rng.normal(size=(4, 3))).value >= 0


def test_inlier_loss_and_total():
    S = sinkhorn_log(np.zeros((3, 3)) + np.eye(3) * 0 + (1 - np.eye(3)) * 4, 1.0, 20)
    lv = inlier_loss(S)
    assert 0 <= lv.value <= 1
    assert total_loss(1, 2, 3, 4, 5) == 15.0
    assert total_loss(1, 2, 3, 4, 5, lam_offset=0.5, lam_obj=2) == 18.0
