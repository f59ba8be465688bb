"""Training losses as pure functions with analytic (sub)gradients.

Nothing here is trained; the functions exist so the loss definitions can be
checked against finite differences and reused by a learned model later.
Every function returns a :class:`LossValue` whose ``gradient`` has the shape
of the prediction input (a tuple for losses with several inputs).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RigidTransform, quat_to_matrix
from .errors import EmptyInput, NonDifferentiable, ZeroQuaternion

W_MAX = 50.0
BCE_CLAMP = 1e-7
POSE_LAMBDA = 50.0
LAMBDA_OFFSET = 1.0
LAMBDA_OBJ = 1.0


@dataclass
class LossValue:
    value: float
    gradient: object
    kink: bool = False          # input sits on a non-differentiable point
    flags: dict = field(default_factory=dict)


def class_weights(labels, w_max: float = W_MAX):
    """``(w_pos, w_neg)``: square-root inverse class frequency, capped."""
    labels = np.asarray(labels)
    n = len(labels)
    n_pos = int((labels == 1).sum())
    n_neg = n - n_pos
    w_pos = min(np.sqrt(n / n_pos), w_max) if n_pos else w_max
    w_neg = min(np.sqrt(n / n_neg), w_max) if n_neg else w_max
    return float(w_pos), float(w_neg)


def weighted_bce(pred, labels, w_max: float = W_MAX) -> LossValue:
    """Class-weighted binary cross-entropy (negative log-likelihood), mean
    over samples. Predictions are clamped to ``[1e-7, 1 - 1e-7]``."""
    pred = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if len(pred) == 0:
        raise EmptyInput("weighted_bce needs at least one sample")
    if pred.shape != y.shape:
        raise ValueError("pred and labels differ in length")
    w_pos, w_neg = class_weights(y, w_max)
    w = np.where(y == 1, w_pos, w_neg)
    p = np.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    n = len(p)
    value = -np.sum(w * (y * np.log(p) + (1 - y) * np.log(1 - p))) / n
    inside = (pred > BCE_CLAMP) & (pred < 1 - BCE_CLAMP)
    grad = np.where(inside, -w * (y / p - (1 - y) / (1 - p)) / n, 0.0)
    kink = bool(np.any((pred == BCE_CLAMP) | (pred == 1 - BCE_CLAMP)))
    return LossValue(float(value), grad, kink, {"w_pos": w_pos, "w_neg": w_neg})


def lovasz_grad(gt_sorted) -> np.ndarray:
    """Jaccard-loss increments along a sorted ground-truth vector (1 = positive)."""
    gt_sorted = np.asarray(gt_sorted, dtype=float)
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if len(jac) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax_binary(scores, labels) -> LossValue:
    """Lovász extension of the foreground Jaccard loss on hinge errors.

    ``labels`` are in {-1, +1}. The subgradient holds the sorting
    permutation fixed. Without positives the Jaccard loss is undefined;
    the value is 0 and ``flags['no_positives']`` is set.
    """
    x = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if len(x) == 0:
        raise EmptyInput("lovasz loss needs at least one sample")
    if x.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if not np.any(y == 1):
        return LossValue(0.0, np.zeros_like(x), False, {"no_positives": True})
    raw = 1.0 - x * y
    m = np.maximum(raw, 0.0)
    perm = np.argsort(-m, kind="stable")
    g = lovasz_grad((y[perm] == 1).astype(float))
    value = float(m[perm] @ g)
    grad = np.zeros_like(x)
    grad[perm] = g * np.where(raw[perm] > 0, -y[perm], 0.0)
    pos = m[m > 0]
    kink = bool(np.any(raw == 0) or len(np.unique(pos)) < len(pos))
    return LossValue(value, grad, kink, {"no_positives": False})


def offset_loss(delta, delta_gt) -> LossValue:
    """Mean over points of ``|d - d_gt|_1 + 1 - cos(d, d_gt)``.

    A zero-length prediction gets directional term 1 and no directional
    gradient. A zero-length target has no direction; its directional term is
    0 so that points sitting on their centroid contribute only the L1 part.
    """
    d = np.asarray(delta, dtype=float).reshape(-1, 3)
    g = np.asarray(delta_gt, dtype=float).reshape(-1, 3)
    if len(d) == 0:
        raise EmptyInput("offset_loss needs at least one point")
    if d.shape != g.shape:
        raise ValueError("prediction and target differ in shape")
    n = len(d)
    diff = d - g
    l1 = np.abs(diff).sum(1)
    nd = np.linalg.norm(d, axis=1)
    ng = np.linalg.norm(g, axis=1)
    ok = (nd > 0) & (ng > 0)
    u = np.zeros_like(g)
    u[ng > 0] = g[ng > 0] / ng[ng > 0, None]
    cos = np.zeros(n)
    cos[ok] = (d[ok] * u[ok]).sum(1) / nd[ok]
    direc = np.where(ng > 0, 1.0 - cos, 0.0)
    value = float((l1 + direc).sum() / n)
    grad = np.sign(diff)
    gd = np.zeros_like(d)
    gd[ok] = -(u[ok] / nd[ok, None] - cos[ok, None] * d[ok] / nd[ok, None] ** 2)
    grad = (grad + gd) / n
    kink = bool(np.any(diff == 0) or np.any((nd == 0) & (ng > 0)))
    return LossValue(value, grad, kink)


def _unit_quat_jacobian(q):
    """d(q/|q|)/dq."""
    nq = np.linalg.norm(q)
    u = q / nq
    return (np.eye(4) - np.outer(u, u)) / nq


def pose_loss(q, t, q_gt, t_gt, lam: float = POSE_LAMBDA) -> LossValue:
    """Mean over source frames of ``|t_gt - t|_2 + lam |q_gt - q/|q||_2``.

    ``q`` is ``(n, 4)`` unnormalized (w, x, y, z), ``t`` is ``(n, 3)``. The
    target quaternion is flipped onto the hemisphere of ``q`` first, since
    ``q`` and ``-q`` are the same rotation. Gradient is ``(dq, dt)``.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    t = np.asarray(t, dtype=float).reshape(-1, 3)
    qg = np.asarray(q_gt, dtype=float).reshape(-1, 4)
    tg = np.asarray(t_gt, dtype=float).reshape(-1, 3)
    n = len(q)
    if n == 0:
        raise EmptyInput("pose_loss needs at least one frame")
    if not (len(t) == len(qg) == len(tg) == n):
        raise ValueError("pose arrays differ in length")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise ZeroQuaternion("quaternion with zero norm")
    qg = qg / np.linalg.norm(qg, axis=1, keepdims=True)
    qg = np.where(((qg * q).sum(1) < 0)[:, None], -qg, qg)
    dq = np.zeros_like(q)
    dt = np.zeros_like(t)
    value = 0.0
    kink = False
    for j in range(n):
        et = t[j] - tg[j]
        rt = np.linalg.norm(et)
        eq = q[j] / norms[j] - qg[j]
        rq = np.linalg.norm(eq)
        value += rt + lam * rq
        if rt > 0:
            dt[j] = et / rt
        else:
            kink = True
        if rq > 0:
            dq[j] = lam * _unit_quat_jacobian(q[j]).T @ (eq / rq)
        else:
            kink = True
    return LossValue(value / n, (dq / n, dt / n), kink)


def _rotate_jacobian(u, p):
    """d(R(u) p)/du for a unit quaternion ``u`` using the homogeneous form
    ``(w^2 - v.v) p + 2 (v.p) v + 2 w (v x p)``; shape (3, 4)."""
    w, v = u[0], u[1:]
    px = np.array([[0, -p[2], p[1]], [p[2], 0, -p[0]], [-p[1], p[0], 0]])
    d_w = 2 * w * p + 2 * np.cross(v, p)
    d_v = -2 * np.outer(p, v) + 2 * np.dot(v, p) * np.eye(3) + 2 * np.outer(v, p) - 2 * w * px
    return np.column_stack([d_w, d_v])


def _as_qt(T):
    if isinstance(T, RigidTransform):
        return np.asarray(T.rotation, dtype=float), np.asarray(T.translation, dtype=float)
    q, t = T
    return np.asarray(q, dtype=float).ravel(), np.asarray(t, dtype=float).ravel()


def trans_loss(T, T_gt, pillars) -> LossValue:
    """Mean L1 distance between pillars moved by ``T`` and by ``T_gt``.

    ``T`` may be a :class:`RigidTransform` or an unnormalized ``(q, t)``
    pair; the gradient ``(dq, dt)`` is taken w.r.t. that pair.
    """
    P = np.asarray(pillars, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise EmptyInput("trans_loss needs at least one pillar")
    q, t = _as_qt(T)
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ZeroQuaternion("quaternion with zero norm")
    u = q / nq
    R = quat_to_matrix(u)
    qg, tg = _as_qt(T_gt)
    Rg = quat_to_matrix(qg / np.linalg.norm(qg))
    diff = P @ R.T + t - (P @ Rg.T + tg)
    n = len(P)
    value = float(np.abs(diff).sum() / n)
    s = np.sign(diff)
    dt = s.sum(0) / n
    du = np.zeros(4)
    for p, sp in zip(P, s):
        du += sp @ _rotate_jacobian(u, p)
    dq = _unit_quat_jacobian(q).T @ du / n
    return LossValue(value, (dq, dt), bool(np.any(diff == 0)))


def inlier_loss(S) -> LossValue:
    """Mass pushed into slack; see :func:`rigid_accum.matcher.inlier_score`."""
    from .matcher import inlier_score
    core = S.core
    n, m = core.shape
    return LossValue(inlier_score(S), np.full(core.shape, -2.0 / (n + m)))


def total_loss(ego, fg, motion, offset, obj, lam_offset: float = LAMBDA_OFFSET,
               lam_obj: float = LAMBDA_OBJ) -> float:
    """Weighted sum of the five task losses (scalar values)."""
    return float(ego + fg + motion + lam_offset * offset + lam_obj * obj)


def grad_check(loss_fn, x, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between the analytic gradient of ``loss_fn`` at
    ``x`` and central differences.

    ``loss_fn`` takes a flat array and returns a :class:`LossValue` whose
    gradient has the same size. Raises :class:`NonDifferentiable` when the
    loss reports a kink at ``x``.
    """
    x = np.asarray(x, dtype=float).ravel()
    lv = loss_fn(x)
    if lv.kink:
        raise NonDifferentiable("loss is not differentiable at this input")
    g = np.concatenate([np.ravel(a) for a in lv.gradient]) if isinstance(lv.gradient, tuple) \
        else np.ravel(lv.gradient)
    num = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        num[i] = (loss_fn(xp).value - loss_fn(xm).value) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
    return float(np.max(np.abs(g - num) / denom))
