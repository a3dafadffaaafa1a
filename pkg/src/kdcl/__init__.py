"""Multi-robot cooperative localization with observability-aware filters.

A team of robots fuses body-frame odometry with robot-to-robot relative
position measurements. The package provides the standard EKF, the
first-estimates-Jacobian and observability-constrained variants, a
decomposition-based filter that performs its covariance arithmetic in
explicitly separated observable/unobservable coordinates, and an ideal
(truth-linearized) oracle, plus a deterministic Monte-Carlo harness with
RMSE / NEES / 3-sigma consistency metrics and a numerical observability
auditor.
"""

__version__ = "0.1.0"

from .decomposition import (
    CanonicalBelief,
    CanonicalLayout,
    CorrectionDeltas,
    build_transform,
    canonical_measurement_jacobian,
    canonical_propagation_jacobian,
    correction_delta,
    invert_transform,
    kd_jacobians,
)
from .errors import ConfigError, NumericalError
from .filters import (
    FILTER_ORDER,
    FilterKind,
    FilterStepInput,
    IdealEkf,
    FejEkf,
    KdEkf,
    OcEkf,
    StdEkf,
    make_filter,
)
from .geometry import (
    Angle,
    ErrorState,
    FleetBelief,
    FleetState,
    RobotPose,
    error_state,
    rot_z,
    rot_z_generator,
    wrap_angle,
)
from .kernels import backend_name
from .models import (
    MeasurementSet,
    NoiseSpec,
    OdometryInput,
    RelPosMeasurement,
    measurement_jacobian,
    motion_jacobians,
    predict_rel_pos,
    propagate_pose,
    stack_fleet_propagation,
    stack_measurement_jacobian,
)
from .observability import (
    JacobianRecord,
    JacobianWindow,
    NullspaceReport,
    audit_filter_run,
    expected_nullspace,
    nullspace_dim,
    observability_matrix,
)
from .simulate import (
    AggregateMetrics,
    HelixSpec,
    SimConfig,
    TrialResult,
    corrupt_odometry,
    default_config,
    generate_measurements,
    generate_truth,
    monte_carlo,
    nees,
    run_trial,
)

__all__ = [name for name in dir() if not name.startswith("_")]
