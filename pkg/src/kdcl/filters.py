"""The cooperative-localization filter bank.

Five estimators share one step contract (propagate each robot with its
measured odometry, then batch-update with all relative-position
measurements):

* ``std``   - textbook EKF, Jacobians at the current best estimates.
* ``fej``   - first-estimates-Jacobian EKF: the propagation Jacobian uses
  the displacement between consecutive *predicted* positions so the
  unobservable subspace keeps its full dimension.
* ``oc``    - observability-constrained EKF: maintains a propagated basis of
  the unobservable subspace and projects the measurement Jacobian onto its
  orthogonal complement before the update.
* ``kd``    - decomposition-based EKF: runs the covariance arithmetic in the
  observable/unobservable canonical coordinates with the correction-coupling
  terms annihilated, then maps the error estimate back.
* ``ideal`` - consistency oracle with every Jacobian evaluated at the true
  states (requires ground truth in the step input).

A filter instance is single-writer: steps are strictly sequential per
instance; independent instances may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import enum
import numpy as np

from . import kernels
from .decomposition import (
    CanonicalBelief,
    CanonicalLayout,
    CorrectionDeltas,
    build_transform,
    canonical_measurement_jacobian,
    canonical_propagation_jacobian,
    invert_transform,
)
from .geometry import (
    ROT_Z_GEN,
    FleetBelief,
    FleetState,
    check_covariance,
    wrap_angles,
)
from .models import (
    MeasurementSet,
    NoiseSpec,
    OdometryInput,
    assemble_h,
    fleet_process_noise,
    fleet_propagation_jacobian,
    observer_rotations,
    predict_measurements,
    propagate_fleet,
)
from .observability import JacobianRecord, expected_nullspace


class FilterKind(enum.Enum):
    STD = "std"
    FEJ = "fej"
    OC = "oc"
    KD = "kd"
    IDEAL = "ideal"


FILTER_ORDER = tuple(k.value for k in FilterKind)


@dataclass(frozen=True, eq=False)
class FilterStepInput:
    """Inputs for one filter step: measured odometry for every robot, the
    (possibly empty) measurement batch, the sample period, and optionally
    the true fleet state at the end of the step (consumed by ``ideal``)."""

    odometry: tuple[OdometryInput, ...]
    measurements: MeasurementSet
    dt: float
    truth: FleetState | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        odom = np.stack([u.as_vector() for u in self.odometry])
        odom.setflags(write=False)
        object.__setattr__(self, "odometry", tuple(self.odometry))
        object.__setattr__(self, "odom_array", odom)


class _FilterBase:
    """Shared bookkeeping: mean storage, Jacobian logging, reporting."""

    kind: FilterKind

    def __init__(self, prior: FleetBelief, noise: NoiseSpec,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        if noise.n != prior.n:
            raise ValueError("noise spec and prior fleet sizes differ")
        if gate_prob is not None and not 0.0 < gate_prob < 1.0:
            raise ValueError(f"gate_prob must be in (0, 1), got {gate_prob}")
        self.n = prior.n
        self.noise = noise
        self.gate_prob = gate_prob
        self._mean = prior.mean.to_vector()
        self._records: list[JacobianRecord] | None = [] if record_jacobians else None
        self._step_index = 0
        self._r_cache: dict[int, np.ndarray] = {}
        self._q_diag = noise.rotation_invariant_diag()
        self._gqg_cache: dict[float, np.ndarray] = {}

    def _gate_rejects(self, cov: np.ndarray, h: np.ndarray, r: np.ndarray,
                      innov: np.ndarray) -> bool:
        """Optional batch innovation gate: reject the whole update when the
        normalized innovation exceeds the chi-square quantile."""
        if self.gate_prob is None:
            return False
        from scipy.stats import chi2

        s = h @ cov @ h.T + r
        stat = float(innov @ np.linalg.solve(s, innov))
        return stat > chi2.ppf(self.gate_prob, innov.size)

    # -- public surface -------------------------------------------------
    def step(self, inp: FilterStepInput) -> None:
        raise NotImplementedError

    def mean_vector(self) -> np.ndarray:
        return self._mean.copy()

    def mean_state(self) -> FleetState:
        return FleetState.from_vector(self._mean)

    def covariance(self) -> np.ndarray:
        """Covariance in the original coordinates, re-symmetrized."""
        raise NotImplementedError

    def reported_belief(self) -> FleetBelief:
        return FleetBelief(self.mean_state(), self.covariance())

    @property
    def jacobian_records(self) -> tuple[JacobianRecord, ...]:
        return tuple(self._records or ())

    # -- helpers ---------------------------------------------------------
    def _stacked_r(self, m: int) -> np.ndarray:
        r = self._r_cache.get(m)
        if r is None:
            r = np.zeros((3 * m, 3 * m))
            for k in range(m):
                r[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = self.noise.r_block
            self._r_cache[m] = r
        return r

    def _gqg(self, yaws: np.ndarray, dt: float) -> np.ndarray:
        """Original-coordinate process noise ``G Q G^T``; constant (and
        cached) when the odometry covariance is rotation-invariant."""
        if self._q_diag is not None:
            gqg = self._gqg_cache.get(dt)
            if gqg is None:
                gqg = np.diag((self._q_diag * dt * dt).ravel())
                self._gqg_cache[dt] = gqg
            return gqg
        return fleet_process_noise(yaws, self.noise.q_blocks, dt)

    def _log(self, f: np.ndarray, h: np.ndarray, mean: np.ndarray) -> None:
        if self._records is not None:
            self._records.append(
                JacobianRecord(self._step_index, f.copy(), h.copy(), mean.copy())
            )


class _GaussianEkf(_FilterBase):
    """Common propagate/update flow for the filters that carry their
    covariance in the original coordinates. Subclasses choose the
    linearization points."""

    def __init__(self, prior: FleetBelief, noise: NoiseSpec,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        super().__init__(prior, noise, record_jacobians, gate_prob)
        self._cov = np.array(prior.covariance)

    # linearization hooks ------------------------------------------------
    def _f_displacements(self, prev: np.ndarray, predicted: np.ndarray,
                         inp: FilterStepInput) -> np.ndarray:
        return (predicted - prev).reshape(self.n, 4)[:, :3]

    def _g_yaws(self, prev: np.ndarray, inp: FilterStepInput) -> np.ndarray:
        return prev[3::4]

    def _h_state(self, predicted: np.ndarray, inp: FilterStepInput) -> np.ndarray:
        return predicted

    def _shape_h(self, h: np.ndarray) -> np.ndarray:
        return h

    def _after_propagate(self, f: np.ndarray) -> None:
        pass

    def _before_step(self, inp: FilterStepInput) -> None:
        pass

    def _after_step(self, inp: FilterStepInput, predicted: np.ndarray) -> None:
        pass

    # step ----------------------------------------------------------------
    def step(self, inp: FilterStepInput) -> None:
        self._step_index += 1
        self._before_step(inp)
        prev = self._mean
        predicted = propagate_fleet(prev, inp.odom_array, inp.dt)
        f = fleet_propagation_jacobian(self._f_displacements(prev, predicted, inp))
        gqg = self._gqg(self._g_yaws(prev, inp), inp.dt)
        self._cov = kernels.propagate_cov(self._cov, f, gqg)
        self._after_propagate(f)
        mset = inp.measurements
        if len(mset):
            lin = self._h_state(predicted, inp)
            ct_obs = observer_rotations(lin, mset.observers)
            h = self._shape_h(assemble_h(lin, mset.observers, mset.targets, ct_obs))
            if lin is predicted:
                y_hat = predict_measurements(predicted, mset.observers,
                                             mset.targets, ct_obs)
            else:
                y_hat = predict_measurements(predicted, mset.observers, mset.targets)
            innov = (mset.values - y_hat).ravel()
            r = self._stacked_r(len(mset))
            if self._gate_rejects(self._cov, h, r, innov):
                self._mean = predicted
            else:
                dx, self._cov = kernels.update_cov(self._cov, h, r, innov)
                updated = predicted + dx
                updated[3::4] = wrap_angles(updated[3::4])
                self._mean = updated
        else:
            h = np.zeros((0, 4 * self.n))
            lin = predicted
            self._mean = predicted
        self._log(f, h, lin)
        self._after_step(inp, predicted)

    def covariance(self) -> np.ndarray:
        return 0.5 * (self._cov + self._cov.T)


class StdEkf(_GaussianEkf):
    kind = FilterKind.STD


class FejEkf(_GaussianEkf):
    """Propagation Jacobian between consecutive first (predicted) estimates."""

    kind = FilterKind.FEJ

    def __init__(self, prior: FleetBelief, noise: NoiseSpec,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        super().__init__(prior, noise, record_jacobians, gate_prob)
        self._first_pos = self._mean.reshape(self.n, 4)[:, :3].copy()

    def _f_displacements(self, prev, predicted, inp):
        return predicted.reshape(self.n, 4)[:, :3] - self._first_pos

    def _after_step(self, inp, predicted):
        self._first_pos = predicted.reshape(self.n, 4)[:, :3].copy()


class OcEkf(_GaussianEkf):
    """Projects the measurement Jacobian onto the orthogonal complement of a
    propagated unobservable-subspace basis before each update."""

    kind = FilterKind.OC

    def __init__(self, prior: FleetBelief, noise: NoiseSpec,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        super().__init__(prior, noise, record_jacobians, gate_prob)
        self._null_basis = expected_nullspace(self._mean)

    def _after_propagate(self, f):
        self._null_basis = f @ self._null_basis

    def _shape_h(self, h):
        n_b = self._null_basis
        # Frobenius-optimal correction: H <- H (I - N (N^T N)^-1 N^T)
        coeff = np.linalg.solve(n_b.T @ n_b, n_b.T @ h.T)
        return h - coeff.T @ n_b.T

    @property
    def null_basis(self) -> np.ndarray:
        return self._null_basis.copy()


class IdealEkf(_GaussianEkf):
    """Oracle: every Jacobian evaluated at the true states."""

    kind = FilterKind.IDEAL

    def __init__(self, prior: FleetBelief, noise: NoiseSpec, truth0: FleetState,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        super().__init__(prior, noise, record_jacobians, gate_prob)
        if truth0 is None:
            raise ValueError("ideal filter needs the true initial state")
        self._truth_prev = truth0.to_vector()
        self._truth_now: np.ndarray | None = None

    def _before_step(self, inp):
        if inp.truth is None:
            raise ValueError("ideal filter requires step input truth")
        self._truth_now = inp.truth.to_vector()

    def _f_displacements(self, prev, predicted, inp):
        return (self._truth_now - self._truth_prev).reshape(self.n, 4)[:, :3]

    def _g_yaws(self, prev, inp):
        return self._truth_prev[3::4]

    def _h_state(self, predicted, inp):
        return self._truth_now

    def _after_step(self, inp, predicted):
        self._truth_prev = self._truth_now


class KdEkf(_FilterBase):
    """Runs covariance arithmetic in the canonical coordinates.

    The carried state is the original-coordinate mean plus the canonical
    covariance; the coordinate map is rebuilt from whatever mean ends the
    step, and the reported original-coordinate covariance is the congruence
    by the closed-form inverse map.
    """

    kind = FilterKind.KD

    def __init__(self, prior: FleetBelief, noise: NoiseSpec,
                 record_jacobians: bool = False,
                 gate_prob: float | None = None):
        super().__init__(prior, noise, record_jacobians, gate_prob)
        t0 = build_transform(self._mean)
        self.last_transform = t0
        self.canonical = CanonicalBelief(
            CanonicalLayout(self.n), t0 @ prior.covariance @ t0.T
        )

    def step(self, inp: FilterStepInput) -> None:
        self._step_index += 1
        n = self.n
        prev = self._mean
        predicted = propagate_fleet(prev, inp.odom_array, inp.dt)
        zero_deltas = CorrectionDeltas.zero(n)
        disp = (predicted - prev).reshape(n, 4)[:, :3]
        f_can = canonical_propagation_jacobian(disp, zero_deltas)
        t_pred = build_transform(predicted)
        gqg_can = t_pred @ self._gqg(prev[3::4], inp.dt) @ t_pred.T
        pcan = kernels.propagate_cov(self.canonical.covariance, f_can, gqg_can)
        mset = inp.measurements
        if len(mset):
            h_can = canonical_measurement_jacobian(predicted, mset, zero_deltas)
            innov = (mset.values - predict_measurements(predicted, mset.observers,
                                                        mset.targets)).ravel()
            r = self._stacked_r(len(mset))
            if self._gate_rejects(pcan, h_can, r, innov):
                self._mean = predicted
            else:
                dz, pcan = kernels.update_cov(pcan, h_can, r, innov)
                self._mean = _recover_mean(predicted, dz)
        else:
            h_can = np.zeros((0, 4 * n))
            self._mean = predicted
        self.canonical = CanonicalBelief(self.canonical.layout, pcan)
        self.last_transform = build_transform(self._mean)
        self._log(f_can, h_can, predicted)

    def covariance(self) -> np.ndarray:
        tinv = invert_transform(self._mean)
        cov = tinv @ self.canonical.covariance @ tinv.T
        return 0.5 * (cov + cov.T)


def _recover_mean(predicted: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Map a canonical error estimate back to an original-coordinate mean.

    Solves ``T(mean_new) (mean_new - predicted) = dz`` exactly: the anchor
    robot takes plain additive corrections, every other robot's position is
    obtained through the resolvent of the yaw generator,
    ``(I - a*J)^-1 = I + (a*J + a^2*J^2) / (1 + a^2)``, which exists for
    every real ``a`` (determinant ``1 + a^2``).
    """
    n = predicted.size // 4
    dim = 4 * n
    z_psi_g = dz[dim - 4]
    z_pos_g = dz[dim - 3 : dim]
    a2 = z_psi_g * z_psi_g
    xi = np.eye(3) + (z_psi_g * ROT_Z_GEN + a2 * (ROT_Z_GEN @ ROT_Z_GEN)) / (1.0 + a2)
    out = predicted.copy()
    pos = out.reshape(n, 4)
    anchor = pos[0, :3] + z_pos_g
    pos[0, :3] = anchor
    pos[0, 3] += z_psi_g
    shift = z_psi_g * (ROT_Z_GEN @ anchor)
    for r in range(1, n):
        b0 = 4 * (r - 1)
        pos[r, :3] = xi @ (pos[r, :3] + z_pos_g - dz[b0 : b0 + 3] - shift)
        pos[r, 3] += dz[b0 + 3] + z_psi_g
    out[3::4] = wrap_angles(out[3::4])
    return out


def make_filter(kind: FilterKind | str, prior: FleetBelief, noise: NoiseSpec,
                *, truth0: FleetState | None = None,
                record_jacobians: bool = False,
                gate_prob: float | None = None) -> _FilterBase:
    """Construct an initialized filter of the requested kind.

    The prior covariance must satisfy the symmetric-PSD contract (checked by
    :class:`FleetBelief`). ``truth0`` is required by ``ideal`` only.
    ``gate_prob`` enables the optional batch innovation gate (off by
    default).
    """
    kind = FilterKind(kind) if not isinstance(kind, FilterKind) else kind
    check_covariance(prior.covariance)
    if kind is FilterKind.STD:
        return StdEkf(prior, noise, record_jacobians, gate_prob)
    if kind is FilterKind.FEJ:
        return FejEkf(prior, noise, record_jacobians, gate_prob)
    if kind is FilterKind.OC:
        return OcEkf(prior, noise, record_jacobians, gate_prob)
    if kind is FilterKind.KD:
        return KdEkf(prior, noise, record_jacobians, gate_prob)
    if kind is FilterKind.IDEAL:
        if truth0 is None:
            raise ValueError("ideal filter needs truth0")
        return IdealEkf(prior, noise, truth0, record_jacobians, gate_prob)
    raise ValueError(f"unknown filter kind {kind!r}")
