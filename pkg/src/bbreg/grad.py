"""Exact gradients of the BBR losses w.r.t. the pose parameters, and Adam.

Gradients are 7-vectors ordered like :meth:`PoseParams.to_vector`:
``(theta, phi, psi, tx, ty, tz, log_alpha)``. They are obtained by reverse-mode
chain rule through the soft argmin, the distance functions and the Euler-angle
rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import ALPHA_FLOOR, PointCloud, PoseParams, euler_derivatives
from .knn import KdTree, mutual_nearest_pairs
from .loss import (
    EPSILON,
    DegenerateLossError,
    _p2p,
    _signed_p2plane,
    softmin_factors,
)

DENSE_VARIANTS = ("softbbs", "softbd", "n")


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("-", "").replace("_", "")
    aliases = {"bbs": "softbbs", "bd": "softbd", "bdn": "n", "baselineicp": "icp"}
    key = aliases.get(key, key)
    if key not in ("softbbs", "softbd", "n", "f", "icp"):
        raise ValueError(f"unknown variant {name!r}")
    return key


def _pose_backward(dL_dR, dL_dt, params: PoseParams, dL_dlog_alpha=0.0):
    dR = euler_derivatives(params.theta, params.phi, params.psi)
    g = np.empty(7)
    g[:3] = np.einsum("ij,kij->k", dL_dR, dR)
    g[3:6] = dL_dt
    g[6] = dL_dlog_alpha
    return g


def _transformed(Q: PointCloud, params: PoseParams):
    R = params.rotation
    q = Q.points @ R.T + params.translation
    n = None if Q.normals is None else Q.normals @ R.T
    return R, q, n


def _soft_backward(D, alpha, epsilon, variant):
    """Loss and dL/dD, dL/dlog_alpha for the soft-buddy losses on matrix ``D``."""
    r, c = softmin_factors(D, alpha, epsilon)
    B = r * c
    s0 = float(B.sum())
    if variant == "softbbs":
        loss = -s0
        g = -B  # dL/dlog(B), shared by the row and column log-softmin terms
        gD = None
    else:
        if s0 < 1e-300:
            raise DegenerateLossError("soft buddy weights vanish; softBD is undefined")
        loss = float(np.vdot(B, D)) / s0
        g = D - loss
        g *= B
        g /= s0
        gD = B
        gD /= s0
    gX = r
    gX *= -g.sum(axis=1, keepdims=True)
    c *= g.sum(axis=0, keepdims=True)
    gX -= c
    g *= 2.0
    gX += g
    g_log_alpha = float(np.vdot(gX, D)) / alpha
    gX *= -1.0 / alpha
    if gD is not None:
        gX += gD
    return loss, gX, g_log_alpha


def loss_and_gradient(variant, P: PointCloud, Q: PointCloud, params: PoseParams, epsilon=EPSILON):
    """Loss value and exact gradient for a dense variant (``softbbs``, ``softbd`` or ``n``).

    Parameters
    ----------
    variant : str
    P : PointCloud
        Target cloud (matrix rows).
    Q : PointCloud
        Source cloud, transformed by ``params`` before comparison.
    params : PoseParams
    epsilon : float
        Stability constant of the soft argmin denominators.

    Returns
    -------
    loss : float
    grad : ndarray, shape (7,)
    """
    variant = canonical_variant(variant)
    if variant not in DENSE_VARIANTS:
        raise ValueError(f"variant {variant!r} has no dense gradient; see loss_and_gradient_f")
    if variant == "n" and (P.normals is None or Q.normals is None):
        raise ValueError("variant N needs normals on both clouds")
    alpha = max(params.alpha, ALPHA_FLOOR)
    R, q, nq = _transformed(Q, params)
    p = P.points
    pb, qb = p[:, None, :], q[None, :, :]

    if variant == "n":
        u, s = _signed_p2plane(pb, P.normals[:, None, :], qb, nq[None])
        D = np.abs(u)
    else:
        D = _p2p(pb, qb)

    loss, gD, g_log_alpha = _soft_backward(D, alpha, epsilon, variant)

    if variant == "n":
        H = gD
        H *= np.sign(u)
        Hs = H * s
        hs_col = Hs.sum(axis=0)
        g_q = nq * hs_col[:, None] + H.T @ P.normals
        g_n = q * hs_col[:, None] - Hs.T @ p
        dL_dR = g_q.T @ Q.points + g_n.T @ Q.normals
    else:
        W = np.divide(gD, D, out=np.zeros_like(D), where=D > 0)
        g_q = q * W.sum(axis=0)[:, None] - W.T @ p
        dL_dR = g_q.T @ Q.points
    return loss, _pose_backward(dL_dR, g_q.sum(axis=0), params, g_log_alpha)


def loss_and_gradient_f(P: PointCloud, Q: PointCloud, params: PoseParams, pairs=None, tree_p=None):
    """Best-buddy filtering loss and its gradient.

    Pairs are matched by point-to-point distance at the current pose unless
    given explicitly; they are held fixed for differentiation, so the
    gradient is that of a piecewise function. ``d log_alpha`` is always 0.

    Returns ``(loss, grad, pairs)``.
    """
    if P.normals is None or Q.normals is None:
        raise ValueError("variant F needs normals on both clouds")
    R, q, nq = _transformed(Q, params)
    if pairs is None:
        pairs = mutual_nearest_pairs(P.points, q, tree_p=tree_p)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise DegenerateLossError("no best-buddy pairs; the clouds are badly misaligned")
    i, j = pairs[:, 0], pairs[:, 1]
    u, s = _signed_p2plane(P.points[i], P.normals[i], q[j], nq[j])
    a = q[j] - P.points[i]
    k = len(pairs)
    loss = float(np.mean(np.abs(u)))
    h = np.sign(u) / k
    g_q = h[:, None] * (s[:, None] * nq[j] + P.normals[i])
    g_n = (h * s)[:, None] * a
    dL_dR = g_q.T @ Q.points[j] + g_n.T @ Q.normals[j]
    return loss, _pose_backward(dL_dR, g_q.sum(axis=0), params), pairs


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(7))
    v: np.ndarray = field(default_factory=lambda: np.zeros(7))
    step_count: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


def adam_step(state: AdamState, params, grad, scale=None, alpha_floor=ALPHA_FLOOR):
    """One bias-corrected Adam update.

    ``params`` may be a :class:`PoseParams` or a plain vector (then no
    temperature clamp is applied). ``scale`` rescales coordinates before the
    update: the optimiser works on ``params / scale``, which lets a single
    learning rate serve angles and translations.

    Returns ``(new_state, new_params)``.
    """
    is_pose = isinstance(params, PoseParams)
    x = params.to_vector() if is_pose else np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=np.float64)
    g = g * scale
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    x = x - scale * state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    new_state = replace(state, m=m, v=v, step_count=t)
    if is_pose:
        x[6] = max(x[6], math.log(alpha_floor))
        return new_state, PoseParams.from_vector(x)
    return new_state, x
