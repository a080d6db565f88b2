"""Distance matrices, best-buddy matrices and the BBR loss functions.

Conventions: rows index the target cloud ``P`` and columns the transformed
source cloud ``Q'``, so ``D[i, j]`` compares ``p_i`` with ``q'_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import ALPHA_FLOOR, PointCloud
from .knn import mutual_nearest_pairs

EPSILON = 1e-12


class DegenerateLossError(ArithmeticError):
    """A loss cannot be evaluated, e.g. no best-buddy pairs remain."""


def _pts(c):
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)


def distance_matrix_p2p(P, Q_t) -> np.ndarray:
    """Euclidean distances ``D[i, j] = |p_i - q'_j|``."""
    p, q = _pts(P), _pts(Q_t)
    return _p2p(p[:, None, :], q[None, :, :])


def _p2p(p, q):
    dx = q[..., 0] - p[..., 0]
    dy = q[..., 1] - p[..., 1]
    dz = q[..., 2] - p[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _require_normals(*clouds):
    for c in clouds:
        if not isinstance(c, PointCloud) or c.normals is None:
            raise ValueError("point-to-plane distances need clouds with normals")


def _dot3(a, b):
    # fixed summation order so dense and per-pair evaluations agree bitwise
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def normal_signs(n_p, n_q):
    """Per-pair sign that turns each source normal towards its target normal.

    ``n_p`` and ``n_q`` are broadcastable normal arrays; a zero dot product keeps +1.
    """
    return np.where(_dot3(n_p, n_q) < 0, -1.0, 1.0)


def _signed_p2plane(p, n_p, q, n_q):
    """Signed distance ``u`` and normal signs ``s`` for broadcastable point/normal arrays."""
    s = normal_signs(n_p, n_q)
    ax = q[..., 0] - p[..., 0]
    ay = q[..., 1] - p[..., 1]
    az = q[..., 2] - p[..., 2]
    along_q = ax * n_q[..., 0] + ay * n_q[..., 1] + az * n_q[..., 2]
    along_p = ax * n_p[..., 0] + ay * n_p[..., 1] + az * n_p[..., 2]
    return s * along_q + along_p, s


def distance_matrix_p2plane(P: PointCloud, Q_t: PointCloud) -> np.ndarray:
    """Symmetric point-to-plane distances ``|<q'_j - p_i, s*n'_j + n_i>|``.

    ``s`` is +1 or -1 per pair so that the two normals are not opposed.
    """
    _require_normals(P, Q_t)
    u, _ = _signed_p2plane(
        P.points[:, None, :], P.normals[:, None, :], Q_t.points[None], Q_t.normals[None]
    )
    return np.abs(u)


def hard_buddy_matrix(D) -> np.ndarray:
    """Binary matrix marking mutual row/column argmins of ``D`` (lowest index wins ties)."""
    D = np.asarray(D, dtype=np.float64)
    n, m = D.shape
    row_min = np.argmin(D, axis=1)
    col_min = np.argmin(D, axis=0)
    B = np.zeros((n, m))
    i = np.arange(n)
    keep = col_min[row_min] == i
    B[i[keep], row_min[keep]] = 1.0
    return B


@dataclass(frozen=True)
class SoftBuddyMatrix:
    values: np.ndarray
    alpha: float
    epsilon: float
    row_weights: np.ndarray  # row-wise soft argmin factor
    col_weights: np.ndarray  # column-wise soft argmin factor


def _softmin_axis(X, axis, log_eps):
    # exp(X - logaddexp(log eps, logsumexp(X))) with a single exp per entry
    mx = X.max(axis=axis, keepdims=True)
    E = np.subtract(X, mx)
    np.exp(E, out=E)
    log_z = np.logaddexp(log_eps, mx + np.log(E.sum(axis=axis, keepdims=True)))
    E *= np.exp(mx - log_z)
    return E


def softmin_factors(D, alpha, epsilon):
    """Row-wise and column-wise soft argmin weights of ``D``."""
    X = np.asarray(D, dtype=np.float64) * (-1.0 / alpha)
    log_eps = math.log(epsilon) if epsilon > 0 else -math.inf
    return _softmin_axis(X, 1, log_eps), _softmin_axis(X, 0, log_eps)


def soft_buddy_matrix(D, alpha, epsilon=EPSILON) -> SoftBuddyMatrix:
    """Product of row-wise and column-wise soft argmins of ``D`` at temperature ``alpha``.

    Evaluated in the log domain, so it stays finite down to ``alpha = 1e-8``.
    """
    if not alpha >= ALPHA_FLOOR:
        raise ValueError(f"alpha={alpha} is below the floor {ALPHA_FLOOR}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    r, c = softmin_factors(D, alpha, epsilon)
    return SoftBuddyMatrix(r * c, float(alpha), float(epsilon), r, c)


def loss_bbs(B) -> float:
    return -float(np.sum(B))


def loss_soft_bbs(Bbar) -> float:
    vals = Bbar.values if isinstance(Bbar, SoftBuddyMatrix) else np.asarray(Bbar)
    return -float(np.sum(vals))


def loss_soft_bd(Bbar, D) -> float:
    """Soft-buddy-weighted mean distance."""
    vals = Bbar.values if isinstance(Bbar, SoftBuddyMatrix) else np.asarray(Bbar)
    total = float(np.sum(vals))
    if total < 1e-300:
        raise DegenerateLossError("soft buddy weights vanish; softBD is undefined")
    return float(np.sum(vals * np.asarray(D))) / total


def pair_p2plane(P: PointCloud, Q_t: PointCloud, pairs) -> np.ndarray:
    """Symmetric point-to-plane distance for each (i, j) row of ``pairs``."""
    _require_normals(P, Q_t)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    u, _ = _signed_p2plane(P.points[i], P.normals[i], Q_t.points[j], Q_t.normals[j])
    return np.abs(u)


def loss_f(pairs, P: PointCloud, Q_t: PointCloud) -> float:
    """Mean symmetric point-to-plane distance over best-buddy pairs."""
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise DegenerateLossError("no best-buddy pairs; the clouds are badly misaligned")
    return float(np.mean(pair_p2plane(P, Q_t, pairs)))


def loss_f_from_clouds(P: PointCloud, Q_t: PointCloud) -> float:
    """Filtering loss with pairs matched by point-to-point distance via KD-trees."""
    return loss_f(mutual_nearest_pairs(P, Q_t), P, Q_t)
