"""Scenario generation, noise injection, trial execution, and Monte-Carlo
aggregation with RMSE / NEES / 3-sigma consistency metrics.

Determinism contract: every random draw comes from a counter-style stream
keyed by ``(master_seed, purpose, trial, robot)``, so results are a pure
function of the configuration and never depend on loop order, the set of
filters requested, or how trials are scheduled across processes.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .errors import ConfigError, NumericalError
from .filters import FILTER_ORDER, FilterKind, FilterStepInput, make_filter
from .geometry import (
    ErrorState,
    FleetBelief,
    FleetState,
    rot_z_batch,
    wrap_angles,
)
from .models import (
    MeasurementSet,
    NoiseSpec,
    OdometryInput,
    RelPosMeasurement,
    predict_measurements,
)

ARENA_LO = np.zeros(3)
ARENA_HI = np.full(3, 10.0)

# Purpose codes for the per-stream seeding.
_STREAM_PRIOR = 0
_STREAM_ODOM = 1
_STREAM_MEAS = 2


@dataclass(frozen=True, slots=True)
class HelixSpec:
    """Analytic helical trajectory: a circle in the horizontal plane, a
    triangle-wave altitude profile reflected at ``z_bounds``, and a linearly
    advancing yaw."""

    center: tuple[float, float]
    radius: float
    angular_rate: float
    vertical_rate: float
    z_bounds: tuple[float, float]
    yaw_rate: float
    initial_phase: float
    initial_yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "z_bounds", (float(self.z_bounds[0]), float(self.z_bounds[1])))
        for name in ("radius", "angular_rate", "vertical_rate", "yaw_rate",
                     "initial_phase", "initial_yaw"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.radius > 0:
            raise ConfigError(f"helix radius must be positive, got {self.radius}")
        if self.z_bounds[0] > self.z_bounds[1]:
            raise ConfigError(f"helix z_bounds must be ordered, got {self.z_bounds}")


def default_helices(n: int) -> tuple[HelixSpec, ...]:
    """Circles around the centers of a square pattern in the middle of the
    10 m arena, 90-degree phase offsets for ``n = 4``."""
    specs = []
    for i in range(n):
        theta = math.pi / 4 + 2.0 * math.pi * i / n
        specs.append(
            HelixSpec(
                center=(5.0 + 2.0 * math.sqrt(2.0) * math.cos(theta),
                        5.0 + 2.0 * math.sqrt(2.0) * math.sin(theta)),
                radius=3.0,
                angular_rate=0.2,
                vertical_rate=0.05,
                z_bounds=(1.0, 9.0),
                yaw_rate=0.2,
                initial_phase=2.0 * math.pi * i / n,
                initial_yaw=2.0 * math.pi * i / n + math.pi / 2.0,
            )
        )
    return tuple(specs)


@dataclass(frozen=True, slots=True)
class SimConfig:
    """Full description of a Monte-Carlo experiment."""

    n: int = 4
    dt: float = 0.1
    steps: int = 3000
    trials: int = 100
    helices: tuple[HelixSpec, ...] = ()
    sigma_v: float = 0.3
    sigma_omega: float = 0.08
    sigma_meas: float = 0.1
    prior_sigma_pos: float = 0.3
    prior_sigma_yaw: float = 0.1
    filters: tuple[str, ...] = FILTER_ORDER
    master_seed: int = 20230617

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"n must be at least 2, got {self.n}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        for name in ("sigma_v", "sigma_omega", "sigma_meas",
                     "prior_sigma_pos", "prior_sigma_yaw"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError(f"master_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        helices = tuple(self.helices) or default_helices(self.n)
        if len(helices) != self.n:
            raise ConfigError(f"got {len(helices)} helices for n={self.n} robots")
        object.__setattr__(self, "helices", helices)
        names = tuple(dict.fromkeys(self.filters))
        unknown = [f for f in names if f not in FILTER_ORDER]
        if unknown:
            raise ConfigError(f"unknown filters {unknown}; valid: {list(FILTER_ORDER)}")
        if not names:
            raise ConfigError("filters must not be empty")
        object.__setattr__(self, "filters", tuple(f for f in FILTER_ORDER if f in names))


def default_config(**overrides) -> SimConfig:
    return SimConfig(**overrides)


def _stream(config: SimConfig, purpose: int, trial: int, robot: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=config.master_seed,
                                 spawn_key=(purpose, trial, robot))
    return np.random.default_rng(seq)


def generate_truth(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Sampled true states and the discrete-consistent body-frame controls.

    Returns ``(states, controls)`` with ``states`` of shape
    ``(steps + 1, 4n)`` and ``controls`` of shape ``(steps, n, 4)``; feeding
    ``controls[k]`` through the noiseless motion model maps ``states[k]``
    exactly onto ``states[k + 1]``.
    """
    n, steps, dt = config.n, config.steps, config.dt
    t = np.arange(steps + 1) * dt
    states = np.zeros((steps + 1, 4 * n))
    for i, h in enumerate(config.helices):
        phase = h.initial_phase + h.angular_rate * t
        states[:, 4 * i] = h.center[0] + h.radius * np.cos(phase)
        states[:, 4 * i + 1] = h.center[1] + h.radius * np.sin(phase)
        z_lo, z_hi = h.z_bounds
        span = z_hi - z_lo
        if span == 0.0 or h.vertical_rate == 0.0:
            states[:, 4 * i + 2] = z_lo
        else:
            u = np.mod(h.vertical_rate * t, 2.0 * span)
            states[:, 4 * i + 2] = z_lo + np.where(u <= span, u, 2.0 * span - u)
        states[:, 4 * i + 3] = wrap_angles(h.initial_yaw + h.yaw_rate * t)
    controls = np.zeros((steps, n, 4))
    pos = states.reshape(steps + 1, n, 4)[:, :, :3]
    yaws = states.reshape(steps + 1, n, 4)[:, :, 3]
    dp = (pos[1:] - pos[:-1]) / dt
    for k in range(steps):
        rots = rot_z_batch(yaws[k])
        controls[k, :, :3] = np.einsum("nji,nj->ni", rots, dp[k])
        controls[k, :, 3] = wrap_angles(yaws[k + 1] - yaws[k]) / dt
    return states, controls


def corrupt_odometry(noiseless: OdometryInput, rng: np.random.Generator,
                     config: SimConfig) -> OdometryInput:
    """Add independent Gaussian noise to each axis of one odometry sample."""
    draw = rng.normal(size=4)
    return OdometryInput(noiseless.v + config.sigma_v * draw[:3],
                         noiseless.omega + config.sigma_omega * draw[3])


def generate_measurements(truth: FleetState, rng: np.random.Generator,
                          config: SimConfig) -> MeasurementSet:
    """Noisy full-graph relative-position measurements at one instant."""
    vec = truth.to_vector()
    n = truth.n
    obs, tgt = _full_graph_indices(n)
    clean = predict_measurements(vec, obs, tgt)
    noisy = clean + config.sigma_meas * rng.normal(size=clean.shape)
    items = [RelPosMeasurement(int(i), int(j), noisy[r])
             for r, (i, j) in enumerate(zip(obs, tgt))]
    return MeasurementSet(items)


def _full_graph_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    obs = np.repeat(np.arange(n), n - 1)
    tgt = np.concatenate([[j for j in range(n) if j != i] for i in range(n)])
    return obs.astype(np.intp), tgt.astype(np.intp)


def nees(error: ErrorState, belief: FleetBelief, robot: int) -> float:
    """Normalized estimation error squared on one robot's 4x4 marginal."""
    e = error.robot(robot)
    block = belief.covariance[4 * robot : 4 * robot + 4, 4 * robot : 4 * robot + 4]
    try:
        sol = np.linalg.solve(block, e)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular marginal covariance for robot {robot}") from exc
    return float(e @ sol)


@dataclass(frozen=True, slots=True)
class TrialSummary:
    """Scalar per-filter outcomes of one trial."""

    rmse_pos: float
    rmse_ori: float
    nees_mean: float
    yaw_outside: int
    pos_outside: int
    samples: int


@dataclass(frozen=True, slots=True, eq=False)
class TrialResult:
    """Per-step errors, 3-sigma envelopes and per-robot NEES for one trial.

    Arrays are indexed ``[step, robot, component]`` with components
    ``[p_x, p_y, p_z, yaw]``; rows of failed filters are NaN from the
    failing step onward.
    """

    trial_index: int
    filters: tuple[str, ...]
    err: dict
    sig3: dict
    nees: dict
    summary: dict
    failed: dict

    @property
    def ok(self) -> bool:
        return not self.failed


def run_trial(config: SimConfig, trial_index: int,
              record_jacobians: bool = False):
    """Execute one seeded trial, feeding the identical noise realization to
    every requested filter. Returns a :class:`TrialResult`; when
    ``record_jacobians`` is set, returns ``(TrialResult, {kind: records})``.
    """
    n, steps, dt = config.n, config.steps, config.dt
    states, controls = generate_truth(config)

    prior_scale = np.array([config.prior_sigma_pos] * 3 + [config.prior_sigma_yaw])
    prior_delta = np.concatenate(
        [_stream(config, _STREAM_PRIOR, trial_index, i).normal(size=4) * prior_scale
         for i in range(n)]
    )
    odom_noise = np.stack(
        [_stream(config, _STREAM_ODOM, trial_index, i).normal(size=(steps, 4))
         * np.array([config.sigma_v] * 3 + [config.sigma_omega])
         for i in range(n)],
        axis=1,
    )  # (steps, n, 4)
    meas_noise = np.stack(
        [_stream(config, _STREAM_MEAS, trial_index, i).normal(size=(steps, n - 1, 3))
         * config.sigma_meas
         for i in range(n)],
        axis=1,
    )  # (steps, n, n-1, 3)

    prior_mean = states[0] + prior_delta
    prior_mean[3::4] = wrap_angles(prior_mean[3::4])
    p0 = np.diag(np.tile(prior_scale**2, n))
    prior = FleetBelief(FleetState.from_vector(prior_mean), p0)
    noise_spec = NoiseSpec.isotropic(n, config.sigma_v, config.sigma_omega,
                                     config.sigma_meas)

    need_truth = FilterKind.IDEAL.value in config.filters
    truth0 = FleetState.from_vector(states[0])
    bank = {
        kind: make_filter(kind, prior, noise_spec,
                          truth0=truth0 if kind == FilterKind.IDEAL.value else None,
                          record_jacobians=record_jacobians)
        for kind in config.filters
    }

    err = {k: np.full((steps, n, 4), np.nan) for k in config.filters}
    sig3 = {k: np.full((steps, n, 4), np.nan) for k in config.filters}
    nees_arr = {k: np.full((steps, n), np.nan) for k in config.filters}
    failed: dict[str, str] = {}

    obs_idx, tgt_idx = _full_graph_indices(n)
    slot_idx = _target_slot(obs_idx, tgt_idx)
    robot_rows = np.arange(n)

    for k in range(steps):
        odometry = tuple(
            OdometryInput(controls[k, i, :3] + odom_noise[k, i, :3],
                          controls[k, i, 3] + odom_noise[k, i, 3])
            for i in range(n)
        )
        clean = predict_measurements(states[k + 1], obs_idx, tgt_idx)
        noisy = clean + meas_noise[k][obs_idx, slot_idx]
        mset = MeasurementSet.from_arrays(obs_idx, tgt_idx, noisy)
        truth_state = FleetState.from_vector(states[k + 1]) if need_truth else None
        inp = FilterStepInput(odometry, mset, dt, truth_state)
        truth_vec = states[k + 1]
        for kind, filt in bank.items():
            if kind in failed:
                continue
            try:
                filt.step(inp)
                cov = filt.covariance()
                e = truth_vec - filt._mean
                e[3::4] = wrap_angles(e[3::4])
                err[kind][k] = e.reshape(n, 4)
                diag = np.diagonal(cov).reshape(n, 4)
                sig3[kind][k] = 3.0 * np.sqrt(np.maximum(diag, 0.0))
                blocks = cov.reshape(n, 4, n, 4)[robot_rows, :, robot_rows, :]
                sol = np.linalg.solve(blocks, e.reshape(n, 4, 1))[:, :, 0]
                nees_arr[kind][k] = np.einsum("ni,ni->n", e.reshape(n, 4), sol)
            except (NumericalError, np.linalg.LinAlgError) as exc:
                failed[kind] = f"step {k + 1}: {exc}"

    summary = {
        kind: _summarize(err[kind], sig3[kind], nees_arr[kind])
        for kind in config.filters
    }
    result = TrialResult(trial_index, config.filters, err, sig3, nees_arr,
                         summary, failed)
    if record_jacobians:
        return result, {kind: bank[kind].jacobian_records for kind in config.filters}
    return result


def _target_slot(obs: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Column of each (observer, target) pair inside the observer's
    measurement-noise block (targets ascending, observer skipped)."""
    return np.where(tgt > obs, tgt - 1, tgt)


def _summarize(err: np.ndarray, sig3: np.ndarray, nees_vals: np.ndarray) -> TrialSummary:
    valid = ~np.isnan(err[:, 0, 0])
    e, s, nv = err[valid], sig3[valid], nees_vals[valid]
    samples = int(e.shape[0] * e.shape[1])
    pos_sq = np.sum(e[:, :, :3] ** 2, axis=2)
    rmse_pos = float(np.sqrt(pos_sq.mean())) if samples else float("nan")
    rmse_ori = float(np.sqrt((e[:, :, 3] ** 2).mean())) if samples else float("nan")
    nees_mean = float(nv.mean()) if samples else float("nan")
    yaw_outside = int(np.count_nonzero(np.abs(e[:, :, 3]) > s[:, :, 3]))
    pos_outside = int(np.count_nonzero((np.abs(e[:, :, :3]) > s[:, :, :3]).any(axis=2)))
    return TrialSummary(rmse_pos, rmse_ori, nees_mean, yaw_outside, pos_outside, samples)


@dataclass(frozen=True, slots=True)
class FilterAggregate:
    """Monte-Carlo averages for one filter (the summary-table row)."""

    rmse_pos: float
    rmse_ori: float
    nees: float


@dataclass(frozen=True, slots=True, eq=False)
class CurveSet:
    """Per-step aggregates across trials: component-wise RMS errors, mean
    3-sigma envelopes, mean per-robot NEES."""

    err_rms: np.ndarray
    sig3_mean: np.ndarray
    nees_mean: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class AggregateMetrics:
    """Everything the Monte-Carlo run reports."""

    config: SimConfig
    summary: dict
    curves: dict
    per_trial: dict
    failed_trials: tuple[int, ...]

    @property
    def filters(self) -> tuple[str, ...]:
        return self.config.filters


def _trial_worker(args) -> TrialResult:
    config, index = args
    return run_trial(config, index)


def monte_carlo(config: SimConfig, jobs: int | None = None) -> AggregateMetrics:
    """Run all trials (concurrently when ``jobs > 1``) and reduce in fixed
    trial order, so the aggregate is independent of scheduling."""
    trials = config.trials
    if jobs is None:
        jobs = min(trials, os.cpu_count() or 1)
    jobs = max(1, int(jobs))

    steps, n = config.steps, config.n
    sum_err_sq = {k: np.zeros((steps, n, 4)) for k in config.filters}
    sum_sig3 = {k: np.zeros((steps, n, 4)) for k in config.filters}
    sum_nees = {k: np.zeros((steps, n)) for k in config.filters}
    per_trial = {
        k: {
            "rmse_pos": np.full(trials, np.nan),
            "rmse_ori": np.full(trials, np.nan),
            "nees": np.full(trials, np.nan),
            "yaw_within_frac": np.full(trials, np.nan),
            "yaw_exited": np.zeros(trials, dtype=bool),
        }
        for k in config.filters
    }
    failed_trials: list[int] = []
    used = 0

    def _consume(result: TrialResult) -> None:
        nonlocal used
        if result.failed:
            failed_trials.append(result.trial_index)
            return
        used += 1
        for k in config.filters:
            sum_err_sq[k] += result.err[k] ** 2
            sum_sig3[k] += result.sig3[k]
            sum_nees[k] += result.nees[k]
            s = result.summary[k]
            pt = per_trial[k]
            pt["rmse_pos"][result.trial_index] = s.rmse_pos
            pt["rmse_ori"][result.trial_index] = s.rmse_ori
            pt["nees"][result.trial_index] = s.nees_mean
            pt["yaw_within_frac"][result.trial_index] = 1.0 - s.yaw_outside / s.samples
            pt["yaw_exited"][result.trial_index] = s.yaw_outside > 0

    if jobs == 1:
        for idx in range(trials):
            _consume(run_trial(config, idx))
    else:
        ctx = get_context()
        with ctx.Pool(processes=jobs) as pool:
            for result in pool.imap(_trial_worker,
                                    ((config, idx) for idx in range(trials)),
                                    chunksize=1):
                _consume(result)

    if used == 0:
        raise NumericalError("every trial failed; nothing to aggregate")

    summary = {}
    curves = {}
    for k in config.filters:
        err_rms = np.sqrt(sum_err_sq[k] / used)
        curves[k] = CurveSet(err_rms, sum_sig3[k] / used, sum_nees[k] / used)
        pos_ms = sum_err_sq[k][:, :, :3].sum() / (used * steps * n)
        ori_ms = sum_err_sq[k][:, :, 3].sum() / (used * steps * n)
        summary[k] = FilterAggregate(
            rmse_pos=float(np.sqrt(pos_ms)),
            rmse_ori=float(np.sqrt(ori_ms)),
            nees=float(sum_nees[k].sum() / (used * steps * n)),
        )
    return AggregateMetrics(config, summary, curves, per_trial, tuple(failed_trials))
