"""Registration driver: runs a BBR variant or the ICP baseline on a cloud pair."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geom import ALPHA_FLOOR, ALPHA_INIT, PointCloud, PoseParams, RigidTransform
from .grad import AdamState, adam_step, canonical_variant, loss_and_gradient, loss_and_gradient_f
from .knn import KdTree, mutual_nearest_pairs
from .loss import EPSILON
from .normals import estimate_normals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    variant: str = "f"
    iterations: int = 300
    lr: float = 0.003
    alpha_init: float = ALPHA_INIT
    alpha_floor: float = ALPHA_FLOOR
    epsilon: float = EPSILON
    k_normals: int = 13
    initial_pose: PoseParams | None = None
    outlier_sigma: float | None = None
    seed: int = 0
    alpha_lr_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if not self.alpha_init >= self.alpha_floor > 0:
            raise ValueError("need alpha_init >= alpha_floor > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.alpha_lr_scale < 0:
            raise ValueError("alpha_lr_scale must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["initial_pose"] = None if self.initial_pose is None else self.initial_pose.to_vector().tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pose = d.get("initial_pose")
        if pose is not None and not isinstance(pose, PoseParams):
            pose = list(pose)
            if len(pose) == 6:
                pose.append(math.log(d.get("alpha_init", ALPHA_INIT)))
            d["initial_pose"] = PoseParams.from_vector(pose)
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RegistrationResult:
    transform: RigidTransform
    final_params: PoseParams
    loss_trace: list[float]
    buddy_count_trace: list[int]
    iterations_run: int
    wall_time: float
    config: RegistrationConfig | None = None
    metadata: dict = field(default_factory=dict)


def _prepare_normals(cloud, k, name, metadata):
    if cloud.normals is not None:
        return cloud
    log.info("estimating normals for %s with k=%d", name, k)
    metadata.setdefault("normals_estimated", []).append(name)
    return estimate_normals(cloud, k)


def _initial_pose(config, center):
    """Express the configured initial pose in the frame centred at ``center``."""
    if config.initial_pose is None:
        return PoseParams(log_alpha=math.log(config.alpha_init))
    pose = config.initial_pose
    # R q + t  ==  R (q - c) + [t + R c - c] + c
    t_c = pose.translation + pose.rotation @ center - center
    return replace(pose, tx=float(t_c[0]), ty=float(t_c[1]), tz=float(t_c[2]))


def register(P: PointCloud, Q: PointCloud, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the rigid transform mapping source ``Q`` onto target ``P``.

    Runs ``config.iterations`` Adam steps on the variant's loss (no early
    stopping). Both clouds are shifted by the source centroid internally so
    that rotations act about the source's centre; the returned transform is
    in the original coordinates.
    """
    config = config or RegistrationConfig()
    if config.variant == "icp":
        return register_baseline_icp(P, Q, config)

    start = time.perf_counter()
    metadata = {"variant": config.variant}
    if config.variant in ("n", "f"):
        P = _prepare_normals(P, config.k_normals, "target", metadata)
        Q = _prepare_normals(Q, config.k_normals, "source", metadata)

    c = Q.centroid()
    Pc = PointCloud(P.points - c, P.normals)
    Qc = PointCloud(Q.points - c, Q.normals)
    params = _initial_pose(config, c)
    scale = np.ones(7)
    scale[3:6] = max(Q.diagonal(), 1e-12)
    scale[6] = config.alpha_lr_scale
    state = AdamState(lr=config.lr)
    tree_p = KdTree(Pc.points)

    loss_trace, count_trace = [], []
    for _ in range(config.iterations):
        if config.variant == "f":
            loss, g, pairs = loss_and_gradient_f(Pc, Qc, params, tree_p=tree_p)
            count = len(pairs)
        else:
            loss, g = loss_and_gradient(config.variant, Pc, Qc, params, config.epsilon)
            q = Qc.points @ params.rotation.T + params.translation
            count = len(mutual_nearest_pairs(Pc.points, q, tree_p=tree_p))
        loss_trace.append(loss)
        count_trace.append(count)
        state, params = adam_step(state, params, g, scale=scale, alpha_floor=config.alpha_floor)

    R = params.rotation
    t = params.translation + c - R @ c
    transform = RigidTransform(R, t)
    final = replace(params, tx=float(t[0]), ty=float(t[1]), tz=float(t[2]))
    return RegistrationResult(
        transform=transform,
        final_params=final,
        loss_trace=[float(v) for v in loss_trace],
        buddy_count_trace=[int(v) for v in count_trace],
        iterations_run=config.iterations,
        wall_time=time.perf_counter() - start,
        config=config,
        metadata=metadata,
    )


def register_pipeline(P, Q, configs) -> RegistrationResult:
    """Run several configurations in sequence, each starting where the last ended."""
    configs = list(configs)
    if not configs:
        raise ValueError("empty pipeline")
    results = []
    pose = configs[0].initial_pose
    for cfg in configs:
        if pose is not None:
            cfg = replace(cfg, initial_pose=pose)
        res = register(P, Q, cfg)
        results.append(res)
        pose = res.final_params
    last = results[-1]
    return RegistrationResult(
        transform=last.transform,
        final_params=last.final_params,
        loss_trace=[v for r in results for v in r.loss_trace],
        buddy_count_trace=[v for r in results for v in r.buddy_count_trace],
        iterations_run=sum(r.iterations_run for r in results),
        wall_time=sum(r.wall_time for r in results),
        config=last.config,
        metadata={"variant": "+".join(r.metadata.get("variant", "") for r in results), "stages": len(results)},
    )


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def _check_not_degenerate(cloud, name):
    pts = cloud.points
    if len(pts) < 3 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-12 * max(cloud.diagonal(), 1e-300)) < 2:
        raise ValueError(f"{name} cloud needs at least 3 non-collinear points")


def register_baseline_icp(P: PointCloud, Q: PointCloud, config: RegistrationConfig | None = None,
                          motion_tol=1e-9) -> RegistrationResult:
    """Classic point-to-point ICP with a closed-form SVD step.

    ``config.iterations`` caps the number of iterations; the loop also stops
    once the incremental motion is below ``motion_tol``. With
    ``config.outlier_sigma`` set, pairs farther than mean + sigma * std of the
    current pair distances are dropped before each alignment.
    """
    config = config or RegistrationConfig(variant="icp", iterations=100)
    start = time.perf_counter()
    _check_not_degenerate(P, "target")
    _check_not_degenerate(Q, "source")
    tree_p = KdTree(P.points)
    if config.initial_pose is not None:
        T = config.initial_pose.transform()
    else:
        T = RigidTransform.identity()
    loss_trace, count_trace = [], []
    iters = 0
    for _ in range(config.iterations):
        q = Q.points @ T.rotation.T + T.translation
        nn, dist = tree_p.nearest(q)
        keep = np.ones(len(q), dtype=bool)
        if config.outlier_sigma is not None and len(dist) > 1:
            keep = dist <= dist.mean() + config.outlier_sigma * dist.std()
            if keep.sum() < 3:
                keep[:] = True
        loss_trace.append(float(dist.mean()))
        count_trace.append(len(mutual_nearest_pairs(P.points, q, tree_p=tree_p)))
        step = kabsch(q[keep], P.points[nn[keep]])
        T = step.compose(T)
        iters += 1
        motion = np.linalg.norm(step.rotation - np.eye(3)) + np.linalg.norm(step.translation)
        if motion < motion_tol:
            break
    final = PoseParams.from_transform(T, alpha=config.alpha_init)
    return RegistrationResult(
        transform=T,
        final_params=final,
        loss_trace=loss_trace,
        buddy_count_trace=count_trace,
        iterations_run=iters,
        wall_time=time.perf_counter() - start,
        config=config,
        metadata={"variant": "icp"},
    )
