"""Synthetic registration experiments: shapes, perturbations, trials and statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import PointCloud, RigidTransform, apply_transform, transform_errors
from .normals import estimate_normals
from .register import RegistrationConfig, register, register_pipeline

log = logging.getLogger(__name__)

SHAPES = ("sphere", "torus", "two_planes", "file")
SHAPE_RADIUS = 0.1


def random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rigid_perturbation(rng, theta_rot, delta_trans) -> RigidTransform:
    """Rotation by ``theta_rot`` degrees about a uniformly random axis, then a
    translation of length ``delta_trans`` along an independent random direction."""
    if not 0.0 <= theta_rot <= 180.0:
        raise ValueError("theta_rot must lie in [0, 180] degrees")
    axis, direction = random_unit_vectors(rng, 2)
    R = axis_angle_matrix(axis, math.radians(theta_rot))
    return RigidTransform(R, delta_trans * direction)


# --- analytic shapes -------------------------------------------------------

def _bump(u):
    # low-order angular modulation without rotational symmetry
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return 0.6 * x * y + 0.5 * y * z * z + 0.4 * x**3 - 0.3 * z + 0.35 * x * z


def sphere_points(rng, n, radius=SHAPE_RADIUS, bump=0.25):
    """Points on a sphere whose radius is modulated by a fixed asymmetric
    pattern (``bump=0`` gives a round sphere)."""
    u = random_unit_vectors(rng, n)
    return u * (radius * (1.0 + bump * _bump(u)))[:, None]


def torus_points(rng, n, major=SHAPE_RADIUS, minor=0.4 * SHAPE_RADIUS):
    # rejection sampling for uniform area density
    out = []
    while sum(len(o) for o in out) < n:
        a = rng.uniform(0, 2 * np.pi, size=2 * n)
        b = rng.uniform(0, 2 * np.pi, size=2 * n)
        w = (major + minor * np.cos(b)) / (major + minor)
        keep = rng.uniform(size=2 * n) < w
        a, b = a[keep], b[keep]
        ring = major + minor * np.cos(b)
        out.append(np.column_stack([ring * np.cos(a), ring * np.sin(a), minor * np.sin(b)]))
    return np.concatenate(out)[:n]


def two_planes_points(rng, n, size=2 * SHAPE_RADIUS):
    """Two perpendicular rectangular patches sharing an edge."""
    k = n // 2
    a = np.column_stack([rng.uniform(0, size, k), rng.uniform(0, 0.7 * size, k), np.zeros(k)])
    b = np.column_stack([np.zeros(n - k), rng.uniform(0, 0.7 * size, n - k), rng.uniform(0, size, n - k)])
    pts = np.concatenate([a, b])
    return pts - pts.mean(axis=0)


def shape_cloud(shape, rng, n, path=None, k_normals=13, noise_sigma=0.0):
    """Dense normal-equipped cloud of ``n`` points (ignored for files).

    ``noise_sigma`` > 0 perturbs points before normals are estimated.
    """
    if shape == "file":
        from .io import read_cloud

        cloud = read_cloud(path)
        pts = cloud.points
    elif shape == "sphere":
        pts = sphere_points(rng, n)
    elif shape == "torus":
        pts = torus_points(rng, n)
    elif shape == "two_planes":
        pts = two_planes_points(rng, n)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    if noise_sigma:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    if shape == "file" and cloud.normals is not None and not noise_sigma:
        return cloud
    return estimate_normals(PointCloud(pts), k_normals)


# --- experiment description ------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    """A named registration method; several configs run as a pipeline."""

    name: str
    configs: tuple

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "pipeline" in d:
            stages = d.pop("pipeline")
            name = d.pop("name", "+".join(s["variant"] for s in stages))
            shared = d
            configs = tuple(RegistrationConfig.from_dict({**shared, **s}) for s in stages)
        else:
            name = d.pop("name", d.get("variant", "f"))
            configs = (RegistrationConfig.from_dict(d),)
        return cls(name, configs)

    def to_dict(self):
        if len(self.configs) == 1:
            return {"name": self.name, **self.configs[0].to_dict()}
        return {"name": self.name, "pipeline": [c.to_dict() for c in self.configs]}

    def run(self, P, Q):
        if len(self.configs) == 1:
            return register(P, Q, self.configs[0])
        return register_pipeline(P, Q, self.configs)


@dataclass(frozen=True)
class ExperimentSpec:
    """Parameters of a repeated synthetic registration experiment.

    ``delta_trans`` is a fraction of the shape's bounding-box diagonal for
    analytic shapes and an absolute length for ``shape="file"``.
    """

    shape: str = "sphere"
    M: int = 500
    theta_rot: float = 8.0
    delta_trans: float = 0.005
    trials: int = 20
    variants: tuple = ()
    seed: int = 0
    shape_path: str | None = None
    distractor_fraction: float | None = None
    distractor_scale: float = 0.5
    noise_sigma: float | None = None
    noise_before_normals: bool = False
    k_normals: int = 13
    dense_factor: int = 70
    failure_threshold_deg: float = 5.0
    same_subsample: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.shape == "file" and not self.shape_path:
            raise ValueError("shape 'file' needs shape_path")
        if self.M < 10:
            raise ValueError("M must be at least 10")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.distractor_fraction is not None and not 0 <= self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must lie in [0, 1)")
        if self.dense_factor < 2:
            raise ValueError("dense_factor must be at least 2")
        variants = tuple(v if isinstance(v, VariantSpec) else VariantSpec.from_dict(v) for v in self.variants)
        object.__setattr__(self, "variants", variants)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["variants"] = [v.to_dict() for v in self.variants]
        return out


@dataclass
class CloudPair:
    P: PointCloud
    Q: PointCloud
    ground_truth: RigidTransform  # the motion applied to the source subsample
    metadata: dict = field(default_factory=dict)

    @property
    def answer(self) -> RigidTransform:
        """Transform that registers ``Q`` onto ``P``."""
        return self.ground_truth.inverse()


def _place(cloud, R, t):
    return apply_transform(RigidTransform(R, t), cloud)


def make_pair(spec: ExperimentSpec, rng, same_subsample=False) -> CloudPair:
    """Draw one target/source pair following ``spec``.

    ``P`` and ``Q`` are independent ``M``-point subsamples of one dense,
    normal-equipped shape; ``Q`` is then moved by ``ground_truth``. Noise (after
    normal estimation unless ``noise_before_normals``) and a distractor object
    with its own motion are added on request.
    """
    M = spec.M
    pre_noise = spec.noise_sigma if (spec.noise_sigma and spec.noise_before_normals) else 0.0
    dense = shape_cloud(spec.shape, rng, spec.dense_factor * M, spec.shape_path, spec.k_normals, pre_noise)
    if len(dense) < 2 * M:
        raise ValueError(f"dense shape has {len(dense)} points, need at least {2 * M}")
    diag = dense.diagonal()
    delta = spec.delta_trans * diag if spec.shape != "file" else spec.delta_trans

    idx_p = rng.choice(len(dense), M, replace=False)
    idx_q = idx_p if same_subsample else rng.choice(len(dense), M, replace=False)
    P = dense.subset(idx_p)
    Q_sub = dense.subset(idx_q)
    gt = random_rigid_perturbation(rng, spec.theta_rot, delta)
    Q = apply_transform(gt, Q_sub)
    metadata = {"diagonal": diag, "delta_trans_abs": delta, "n_distractor": 0}

    if spec.distractor_fraction:
        n_d = int(math.floor(spec.distractor_fraction * M))
        if n_d > 0:
            d_dense = shape_cloud(spec.shape, rng, spec.dense_factor * n_d, spec.shape_path, spec.k_normals, pre_noise)
            d_pts = (d_dense.points - d_dense.centroid()) * spec.distractor_scale
            d_dense = PointCloud(d_pts, d_dense.normals)
            offset = random_unit_vectors(rng, 1)[0] * 0.6 * diag
            dp = d_dense.subset(rng.choice(len(d_dense), n_d, replace=False))
            dq = d_dense.subset(rng.choice(len(d_dense), n_d, replace=False))
            # the distractor's own motion about its centre, seen through the
            # same sensor motion as the main object
            motion = random_rigid_perturbation(rng, spec.theta_rot, delta)
            dp = _place(dp, np.eye(3), offset)
            dq = apply_transform(gt, _place(dq, motion.rotation, motion.translation + offset))
            P = _concat(P, dp)
            Q = _concat(Q, dq)
            metadata["n_distractor"] = n_d
            metadata["distractor_offset"] = offset.tolist()

    if spec.noise_sigma and not spec.noise_before_normals:
        P = PointCloud(P.points + rng.normal(scale=spec.noise_sigma, size=P.points.shape), P.normals)
        Q = PointCloud(Q.points + rng.normal(scale=spec.noise_sigma, size=Q.points.shape), Q.normals)
    return CloudPair(P, Q, gt, metadata)


def _concat(a: PointCloud, b: PointCloud) -> PointCloud:
    normals = None
    if a.normals is not None and b.normals is not None:
        normals = np.concatenate([a.normals, b.normals])
    return PointCloud(np.concatenate([a.points, b.points]), normals)


# --- running and summarising -----------------------------------------------

@dataclass
class TrialRecord:
    trial: int
    variant: str
    angular_error: float
    translation_error: float
    iterations: int
    final_loss: float | None
    final_buddy_count: int | None
    failed: bool
    message: str = ""
    wall_time: float = 0.0


def cumulative_distribution(errors, thresholds=None):
    """Fraction of trials with error at or below each threshold.

    Without ``thresholds`` the sorted errors themselves are used, so the
    curve ends at 1.0 at the largest error.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if thresholds is None:
        thresholds = e
    thresholds = np.asarray(thresholds, dtype=np.float64)
    frac = np.searchsorted(e, thresholds, side="right") / len(e)
    return [(float(t), float(f)) for t, f in zip(thresholds, frac)]


def summarize(errors, failure_threshold=None):
    e = np.asarray(errors, dtype=np.float64)
    out = {
        "median": float(np.median(e)),
        "mean": float(np.mean(e)),
        "max": float(np.max(e)),
        "cdf": cumulative_distribution(e),
    }
    if failure_threshold is not None:
        out["failure_fraction"] = float(np.mean(e > failure_threshold))
    return out


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    records: list

    def variant_names(self):
        seen = []
        for r in self.records:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def errors(self, variant, kind="angular"):
        attr = "angular_error" if kind == "angular" else "translation_error"
        return [getattr(r, attr) for r in self.records if r.variant == variant]

    def aggregates(self):
        out = {}
        for name in self.variant_names():
            out[name] = {
                "angular": summarize(self.errors(name, "angular"), self.spec.failure_threshold_deg),
                "translation": summarize(self.errors(name, "translation")),
                "failed_runs": sum(r.failed for r in self.records if r.variant == name),
            }
        return out

    def median(self, variant, kind="angular"):
        return float(np.median(self.errors(variant, kind)))

    def failure_fraction(self, variant):
        e = np.asarray(self.errors(variant, "angular"))
        return float(np.mean(e > self.spec.failure_threshold_deg))


def trial_rng(seed, trial):
    return np.random.default_rng([int(seed), int(trial)])


def run_trial(spec: ExperimentSpec, trial: int):
    rng = trial_rng(spec.seed, trial)
    pair = make_pair(spec, rng, same_subsample=spec.same_subsample)
    answer = pair.answer
    records = []
    for v in spec.variants:
        try:
            res = v.run(pair.P, pair.Q)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("trial %d, %s failed: %s", trial, v.name, exc)
            records.append(TrialRecord(trial, v.name, math.inf, math.inf, 0, None, None, True, str(exc)))
            continue
        ang, tr = transform_errors(res.transform, answer)
        records.append(TrialRecord(
            trial, v.name, ang, tr, res.iterations_run,
            res.loss_trace[-1] if res.loss_trace else None,
            res.buddy_count_trace[-1] if res.buddy_count_trace else None,
            False, "", res.wall_time,
        ))
    return records


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Run every variant on ``spec.trials`` independent pairs.

    Trial ``k`` draws from a generator seeded by ``(spec.seed, k)``, so
    results do not depend on execution order.
    """
    records = []
    for trial in range(spec.trials):
        records.extend(run_trial(spec, trial))
    return ExperimentReport(spec, records)
