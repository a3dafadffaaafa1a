"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report. The Monte-Carlo fixture shared by criteria 4 and 5 runs the default
four-robot scenario (3000 steps, 50 trials) once.
"""

import json
import time

import numpy as np
import pytest

from kdcl.cli import cli_main
from kdcl.decomposition import (
    CorrectionDeltas,
    build_transform,
    canonical_measurement_jacobian,
    canonical_propagation_jacobian,
    invert_transform,
)
from kdcl.filters import FilterStepInput, make_filter
from kdcl.geometry import FleetBelief, FleetState, wrap_angle, wrap_angles
from kdcl.models import (
    MeasurementSet,
    NoiseSpec,
    OdometryInput,
    RelPosMeasurement,
    fleet_propagation_jacobian,
    measurement_jacobian,
    motion_jacobians,
    predict_rel_pos,
    propagate_pose,
    stack_measurement_jacobian,
)
from kdcl.observability import audit_filter_run
from kdcl.simulate import default_config, monte_carlo, run_trial

from conftest import make_pose, random_fleet, random_spd
from test_filters import kd_step_oracle, random_input, random_setup

FD_STEP = 1e-5


def report(num, detail):
    print(f"ACCEPTANCE {num} [PASS] {detail}")


@pytest.fixture(scope="module")
def consistency_mc():
    config = default_config(steps=3000, trials=50,
                            filters=("std", "fej", "oc", "kd"))
    t0 = time.perf_counter()
    metrics = monte_carlo(config, jobs=2)
    elapsed = time.perf_counter() - t0
    return metrics, elapsed


def test_criterion_1_jacobian_finite_differences(rng):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 5))
        dt = float(rng.uniform(0.02, 0.5))
        # motion Jacobians, one robot per configuration
        prev = make_pose(*rng.uniform(-5, 5, 3), rng.uniform(-np.pi, np.pi))
        u = OdometryInput(rng.normal(0, 1, 3), rng.normal())
        predicted = propagate_pose(prev, u, np.zeros(4), dt)
        f, g = motion_jacobians(prev, predicted, dt)
        fd_f = np.zeros((4, 4))
        fd_g = np.zeros((4, 4))
        for c in range(4):
            delta = np.zeros(4)
            delta[c] = FD_STEP
            hi = propagate_pose(_perturb(prev, delta), u, np.zeros(4), dt)
            lo = propagate_pose(_perturb(prev, -delta), u, np.zeros(4), dt)
            fd_f[:, c] = _pose_delta(hi, lo) / (2 * FD_STEP)
            hi = propagate_pose(prev, u, delta, dt)
            lo = propagate_pose(prev, u, -delta, dt)
            fd_g[:, c] = _pose_delta(hi, lo) / (2 * FD_STEP)
        worst = max(worst, _rel_err(f, fd_f), _rel_err(g, fd_g))
        # measurement Jacobian for a random ordered pair
        state = random_fleet(rng, n)
        i, j = rng.choice(n, size=2, replace=False)
        h = measurement_jacobian(state, int(i), int(j))
        fd_h = np.zeros((3, 4 * n))
        for c in range(4 * n):
            delta = np.zeros(4 * n)
            delta[c] = FD_STEP
            hi = predict_rel_pos(_apply_error(state, delta), int(i), int(j))
            lo = predict_rel_pos(_apply_error(state, -delta), int(i), int(j))
            fd_h[:, c] = (hi - lo) / (2 * FD_STEP)
        worst = max(worst, _rel_err(h, fd_h))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-6, f"finite-difference mismatch {worst:.3e}"
    assert elapsed < 5.0, f"criterion 1 took {elapsed:.2f}s"
    report(1, f"analytic F, G, H match central differences to {worst:.2e} "
              f"(limit 1e-6) over 100 configs in {elapsed:.2f}s")


def _perturb(pose, delta):
    return make_pose(*(pose.position + delta[:3]),
                     wrap_angle(pose.yaw.radians + delta[3]))


def _pose_delta(hi, lo):
    out = hi.as_vector() - lo.as_vector()
    out[3] = wrap_angle(out[3])
    return out


def _apply_error(state, delta):
    vec = state.to_vector() + delta
    vec[3::4] = wrap_angles(vec[3::4])
    return FleetState.from_vector(vec)


def _rel_err(analytic, fd):
    return float(np.abs(analytic - fd).max() / max(1.0, np.abs(analytic).max()))


def full_graph(n):
    return MeasurementSet([RelPosMeasurement(i, j, np.zeros(3))
                           for i in range(n) for j in range(n) if i != j])


def test_criterion_2_canonical_equivalence(rng):
    t0 = time.perf_counter()
    worst_f = worst_h = 0.0
    for trial in range(100):
        n = (2, 3, 4)[trial % 3]
        prev = random_fleet(rng, n).to_vector()
        pred = prev + rng.normal(0, 0.3, prev.size)
        upd = pred + rng.normal(0, 0.05, prev.size)
        disp = (pred - prev).reshape(n, 4)[:, :3]
        deltas = CorrectionDeltas.from_states(pred, upd)
        f = fleet_propagation_jacobian(disp)
        f_can = canonical_propagation_jacobian(disp, deltas)
        ref_f = build_transform(upd) @ f @ np.linalg.inv(build_transform(prev))
        worst_f = max(worst_f, float(np.abs(f_can - ref_f).max()))
        h, _ = stack_measurement_jacobian(pred, full_graph(n))
        h_can = canonical_measurement_jacobian(pred, full_graph(n), deltas)
        ref_h = h @ np.linalg.inv(build_transform(upd))
        worst_h = max(worst_h, float(np.abs(h_can - ref_h).max()))
    elapsed = time.perf_counter() - t0
    assert worst_f < 1e-9, f"propagation equivalence off by {worst_f:.3e}"
    assert worst_h < 1e-9, f"measurement equivalence off by {worst_h:.3e}"
    assert elapsed < 5.0, f"criterion 2 took {elapsed:.2f}s"
    report(2, f"canonical forms equal transform conjugations to "
              f"{max(worst_f, worst_h):.2e} (limit 1e-9) over 100 scenarios "
              f"in {elapsed:.2f}s")


def test_criterion_3_nullspace_dimensions():
    t0 = time.perf_counter()
    config = default_config(steps=100, trials=1)
    _, logs = run_trial(config, 0, record_jacobians=True)
    dims = {}
    for kind in config.filters:
        audit = audit_filter_run(logs[kind], window=5, tol_ratio=1e-8,
                                 canonical=(kind == "kd"))
        dims[kind] = audit
    elapsed = time.perf_counter() - t0
    std = dims["std"]
    assert std.first_deficient is not None, "standard EKF never lost a dimension"
    assert all(d == 3 for d in std.dimensions()), (
        f"standard EKF dims {sorted(set(std.dimensions()))}")
    for kind in ("fej", "oc", "kd", "ideal"):
        audit = dims[kind]
        assert audit.first_deficient is None, f"{kind} lost a dimension"
        assert all(d == 4 for d in audit.dimensions()), (
            f"{kind} dims {sorted(set(audit.dimensions()))}")
    assert elapsed < 10.0, f"criterion 3 took {elapsed:.2f}s"
    report(3, f"null-space dimension 3 for std (first deficient window at "
              f"step {std.first_deficient}), 4 elsewhere, over a 10 s run "
              f"in {elapsed:.2f}s")


def test_criterion_4_consistency_reproduction(consistency_mc):
    metrics, elapsed = consistency_mc
    s = metrics.summary
    nees_kd = s["kd"].nees
    nees_std = s["std"].nees
    nees_fej = s["fej"].nees
    nees_oc = s["oc"].nees
    assert 3.0 <= nees_kd <= 6.0, f"KD NEES {nees_kd:.3f} outside [3, 6]"
    assert nees_std > 8.0, f"std NEES {nees_std:.3f} not above 8"
    assert nees_std > 1.5 * nees_kd, (
        f"std NEES {nees_std:.3f} not 1.5x KD {nees_kd:.3f}")
    gap = abs(nees_fej - nees_oc)
    assert gap < 0.15 * min(nees_fej, nees_oc), (
        f"FEJ/OC NEES differ by {gap:.3f}")
    assert s["kd"].rmse_pos <= s["std"].rmse_pos, (
        f"KD pos RMSE {s['kd'].rmse_pos:.4f} > std {s['std'].rmse_pos:.4f}")
    assert s["kd"].rmse_ori <= s["std"].rmse_ori, (
        f"KD ori RMSE {s['kd'].rmse_ori:.4f} > std {s['std'].rmse_ori:.4f}")
    assert not metrics.failed_trials
    assert elapsed < 120.0, f"Monte Carlo took {elapsed:.1f}s"
    report(4, f"50-trial NEES std={nees_std:.2f} fej={nees_fej:.2f} "
              f"oc={nees_oc:.2f} kd={nees_kd:.2f}; pos RMSE "
              f"kd={s['kd'].rmse_pos:.3f} <= std={s['std'].rmse_pos:.3f}; "
              f"ran in {elapsed:.1f}s")


def test_criterion_5_three_sigma_envelopes(consistency_mc):
    metrics, _ = consistency_mc
    std_exited = metrics.per_trial["std"]["yaw_exited"]
    kd_within = metrics.per_trial["kd"]["yaw_within_frac"]
    joint = std_exited & (kd_within >= 0.99)
    frac = float(np.mean(joint))
    assert frac >= 0.60, f"only {frac:.2f} of trials satisfy the envelope claim"
    report(5, f"{frac:.2f} of trials have std orientation escaping 3-sigma "
              f"while KD stays within for >=99% of steps (need >=0.60)")


def test_criterion_6_kd_single_step_oracle(rng):
    worst_mean = worst_cov = 0.0
    for _ in range(20):
        prior, noise = random_setup(rng, 3)
        filt = make_filter("kd", prior, noise)
        pcan0 = filt.canonical.covariance.copy()
        inp = random_input(rng, 3)
        filt.step(inp)
        mean_ref, pcan_ref = kd_step_oracle(prior.mean.to_vector(), pcan0,
                                            noise, inp)
        worst_mean = max(worst_mean,
                         float(np.abs(filt.mean_vector() - mean_ref).max()))
        worst_cov = max(worst_cov,
                        float(np.abs(filt.canonical.covariance - pcan_ref).max()))
        tinv = invert_transform(mean_ref)
        rep_ref = tinv @ pcan_ref @ tinv.T
        rep_ref = 0.5 * (rep_ref + rep_ref.T)
        worst_cov = max(worst_cov,
                        float(np.abs(filt.covariance() - rep_ref).max()))
    assert worst_mean < 1e-9, f"mean mismatch {worst_mean:.3e}"
    assert worst_cov < 1e-8, f"covariance mismatch {worst_cov:.3e}"
    report(6, f"decomposition filter matches the straight-line oracle to "
              f"{worst_mean:.2e} (mean) / {worst_cov:.2e} (covariance) "
              f"over 20 scenarios")


def test_criterion_7_determinism(tmp_path):
    config_path = tmp_path / "config.yaml"
    config_path.write_text("steps: 60\ntrials: 4\nfilters: [std, kd]\n")
    outs = [tmp_path / name for name in ("run_a", "run_b", "run_c")]
    assert cli_main(["montecarlo", "--config", str(config_path),
                     "--out", str(outs[0]), "--jobs", "1"]) == 0
    assert cli_main(["montecarlo", "--config", str(config_path),
                     "--out", str(outs[1]), "--jobs", "1"]) == 0
    assert cli_main(["montecarlo", "--config", str(config_path),
                     "--out", str(outs[2]), "--jobs", "2"]) == 0
    for name in ("summary.csv", "curves.csv"):
        ref = (outs[0] / name).read_bytes()
        assert (outs[1] / name).read_bytes() == ref, f"{name} differs on rerun"
        assert (outs[2] / name).read_bytes() == ref, (
            f"{name} differs across scheduling")
    stripped = []
    for out in outs:
        doc = json.loads((out / "manifest.json").read_text())
        doc.pop("started_at")
        doc.pop("finished_at")
        stripped.append(json.dumps(doc, sort_keys=True))
    assert stripped[0] == stripped[1] == stripped[2]
    report(7, "montecarlo outputs byte-identical across reruns and "
              "trial-scheduling orders (manifest timestamps excluded)")


def test_criterion_8_round_trip_and_hygiene(rng):
    # transform round trip
    worst_rt = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 5))
        state = random_fleet(rng, n)
        t = build_transform(state)
        tinv = invert_transform(state)
        worst_rt = max(worst_rt,
                       float(np.abs(t @ tinv - np.eye(4 * n)).max()),
                       float(np.abs(tinv @ t - np.eye(4 * n)).max()))
    assert worst_rt < 1e-11, f"transform round trip off by {worst_rt:.3e}"

    # KD prior recovery
    prior, noise = random_setup(rng, 3)
    kd = make_filter("kd", prior, noise)
    prior_err = float(np.abs(kd.covariance() - prior.covariance).max())
    assert prior_err < 1e-10, f"KD reported prior off by {prior_err:.3e}"

    # symmetric PSD covariances after every step of a full default run
    from kdcl.simulate import _STREAM_MEAS, _STREAM_ODOM, _STREAM_PRIOR, _stream
    from kdcl.simulate import _full_graph_indices, _target_slot, generate_truth
    from kdcl.models import predict_measurements

    config = default_config(steps=3000, trials=1)
    states, controls = generate_truth(config)
    n = config.n
    scale = np.array([config.prior_sigma_pos] * 3 + [config.prior_sigma_yaw])
    prior_delta = np.concatenate(
        [_stream(config, _STREAM_PRIOR, 0, i).normal(size=4) * scale
         for i in range(n)])
    odom_noise = np.stack(
        [_stream(config, _STREAM_ODOM, 0, i).normal(size=(config.steps, 4))
         * np.array([config.sigma_v] * 3 + [config.sigma_omega])
         for i in range(n)], axis=1)
    meas_noise = np.stack(
        [_stream(config, _STREAM_MEAS, 0, i).normal(size=(config.steps, n - 1, 3))
         * config.sigma_meas for i in range(n)], axis=1)
    mean0 = states[0] + prior_delta
    mean0[3::4] = wrap_angles(mean0[3::4])
    prior_belief = FleetBelief(FleetState.from_vector(mean0),
                               np.diag(np.tile(scale**2, n)))
    spec = NoiseSpec.isotropic(n, config.sigma_v, config.sigma_omega,
                               config.sigma_meas)
    truth0 = FleetState.from_vector(states[0])
    bank = {kind: make_filter(kind, prior_belief, spec,
                              truth0=truth0 if kind == "ideal" else None)
            for kind in config.filters}
    obs_idx, tgt_idx = _full_graph_indices(n)
    slot_idx = _target_slot(obs_idx, tgt_idx)
    worst_asym = 0.0
    worst_ratio = 0.0
    for k in range(config.steps):
        odometry = tuple(
            OdometryInput(controls[k, i, :3] + odom_noise[k, i, :3],
                          controls[k, i, 3] + odom_noise[k, i, 3])
            for i in range(n))
        clean = predict_measurements(states[k + 1], obs_idx, tgt_idx)
        mset = MeasurementSet.from_arrays(obs_idx, tgt_idx,
                                          clean + meas_noise[k][obs_idx, slot_idx])
        inp = FilterStepInput(odometry, mset, config.dt,
                              FleetState.from_vector(states[k + 1]))
        for kind, filt in bank.items():
            filt.step(inp)
            cov = filt.covariance()
            worst_asym = max(worst_asym, float(np.abs(cov - cov.T).max()))
            eigs = np.linalg.eigvalsh(cov)
            ratio = eigs[0] / max(eigs[-1], 1e-300)
            worst_ratio = min(worst_ratio, float(ratio))
    assert worst_asym < 1e-12, f"asymmetry {worst_asym:.3e}"
    assert worst_ratio >= -1e-9, f"eigenvalue ratio {worst_ratio:.3e}"
    report(8, f"transform round trip {worst_rt:.2e} (limit 1e-11); KD prior "
              f"recovery {prior_err:.2e} (limit 1e-10); min eig ratio "
              f"{worst_ratio:.2e} over a full default run of all filters")
