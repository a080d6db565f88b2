"""Best-buddy rigid point-cloud registration.

Setting ``BBREG_THREADS`` before import caps the BLAS thread pools.
"""

import os as _os

if _os.environ.get("BBREG_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BBREG_THREADS"])

from .geom import (  # noqa: E402
    ALPHA_FLOOR,
    ALPHA_INIT,
    PointCloud,
    PoseParams,
    RigidTransform,
    angular_error,
    apply_transform,
    rotation_from_euler,
    transform_errors,
    translation_error,
)
from .grad import AdamState, adam_step, loss_and_gradient, loss_and_gradient_f  # noqa: E402
from .io import read_cloud, write_cloud, write_result  # noqa: E402
from .knn import KdTree, build_kdtree, k_nearest, mutual_nearest_pairs, nearest  # noqa: E402
from .loss import (  # noqa: E402
    DegenerateLossError,
    distance_matrix_p2p,
    distance_matrix_p2plane,
    hard_buddy_matrix,
    loss_bbs,
    loss_f,
    loss_soft_bbs,
    loss_soft_bd,
    soft_buddy_matrix,
)
from .normals import DegenerateNeighborhoodError, estimate_normals  # noqa: E402
from .register import (  # noqa: E402
    RegistrationConfig,
    RegistrationResult,
    register,
    register_baseline_icp,
    register_pipeline,
)
from .synth import ExperimentSpec, make_pair, random_rigid_perturbation, run_experiment  # noqa: E402

__version__ = "0.1.0"
