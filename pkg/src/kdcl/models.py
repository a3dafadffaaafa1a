"""Motion and relative-position measurement models with analytic Jacobians.

Motion, per robot over one sample period ``dt``::

    p' = p + rot_z(psi) @ (v + nu) * dt
    psi' = wrap(psi + (omega + w) * dt)

where ``v`` (m/s) and ``omega`` (rad/s) are body-frame rates and
``(nu, w)`` is the odometry noise. The exteroceptive measurement is the
target's position expressed in the observer's body frame::

    y_ij = rot_z(psi_i)^T @ (p_j - p_i) + eta

Error-state Jacobians follow the additive-position / wrapped-yaw error
convention used throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .geometry import (
    ROT_Z_GEN,
    Angle,
    FleetState,
    RobotPose,
    fleet_vector,
    rot_z,
    rot_z_batch,
    wrap_angle,
)


@dataclass(frozen=True, slots=True, eq=False)
class OdometryInput:
    """Body-frame linear velocity (3-vector, m/s) and yaw rate (rad/s)."""

    v: np.ndarray
    omega: float

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(v)) and np.isfinite(self.omega)):
            raise ValueError("odometry components must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", float(self.omega))

    def as_vector(self) -> np.ndarray:
        out = np.empty(4)
        out[:3] = self.v
        out[3] = self.omega
        return out


def _check_spd_block(name: str, block: np.ndarray) -> np.ndarray:
    block = np.array(block, dtype=float)
    if np.abs(block - block.T).max() > 1e-9 * (np.abs(block).max() or 1.0):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(block)[0] < -1e-12 * max(np.abs(block).max(), 1.0):
        raise ValueError(f"{name} must be positive semi-definite")
    block.setflags(write=False)
    return block


@dataclass(frozen=True, slots=True, eq=False)
class NoiseSpec:
    """Per-robot odometry covariances and the shared relative-position
    measurement covariance.

    ``q_blocks``: ``(n, 4, 4)``, units (m/s)^2 and (rad/s)^2.
    ``r_block``: ``(3, 3)``, m^2, applied to every measurement pair.
    """

    q_blocks: np.ndarray
    r_block: np.ndarray

    def __post_init__(self):
        q = np.array(self.q_blocks, dtype=float)
        if q.ndim != 3 or q.shape[1:] != (4, 4):
            raise ValueError(f"q_blocks shape {q.shape} is not (n, 4, 4)")
        for i in range(q.shape[0]):
            _check_spd_block(f"q_blocks[{i}]", q[i])
        q.setflags(write=False)
        object.__setattr__(self, "q_blocks", q)
        r = np.asarray(self.r_block, dtype=float).reshape(3, 3)
        object.__setattr__(self, "r_block", _check_spd_block("r_block", r))

    @property
    def n(self) -> int:
        return self.q_blocks.shape[0]

    def rotation_invariant_diag(self) -> np.ndarray | None:
        """Per-robot diagonal ``(n, 4)`` when every block is diagonal with an
        isotropic linear part (then ``G Q G^T`` is independent of yaw and can
        be cached); ``None`` otherwise."""
        q = self.q_blocks
        off = q - q * np.eye(4)
        if np.any(off != 0.0):
            return None
        diag = np.einsum("nii->ni", q)
        if np.any(diag[:, 0] != diag[:, 1]) or np.any(diag[:, 0] != diag[:, 2]):
            return None
        return diag.copy()

    @classmethod
    def isotropic(cls, n: int, sigma_v: float, sigma_omega: float,
                  sigma_meas: float) -> "NoiseSpec":
        q = np.zeros((n, 4, 4))
        q[:, :3, :3] = sigma_v**2 * np.eye(3)
        q[:, 3, 3] = sigma_omega**2
        return cls(q, sigma_meas**2 * np.eye(3))


@dataclass(frozen=True, slots=True)
class RelPosMeasurement:
    """One relative-position observation of ``target`` made by ``observer``,
    expressed in the observer's body frame."""

    observer: int
    target: int
    value: np.ndarray

    def __post_init__(self):
        if self.observer == self.target:
            raise ValueError("observer and target must differ")
        if self.observer < 0 or self.target < 0:
            raise ValueError("robot indices must be non-negative")
        val = np.asarray(self.value, dtype=float).reshape(3).copy()
        val.setflags(write=False)
        object.__setattr__(self, "value", val)


class MeasurementSet:
    """Ordered batch of relative-position measurements for one filter step.

    The stacking order of rows in every derived vector/Jacobian is the order
    of ``items`` (conventionally observer-major, then target).
    """

    __slots__ = ("observers", "targets", "values", "_items")

    def __init__(self, items: Sequence[RelPosMeasurement]):
        items = tuple(items)
        pairs = [(m.observer, m.target) for m in items]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (observer, target) pair in measurement set")
        self._items = items
        self.observers = np.array([m.observer for m in items], dtype=np.intp)
        self.targets = np.array([m.target for m in items], dtype=np.intp)
        self.values = (
            np.stack([m.value for m in items]) if items else np.zeros((0, 3))
        )

    @property
    def items(self) -> tuple[RelPosMeasurement, ...]:
        if self._items is None:
            self._items = tuple(
                RelPosMeasurement(int(i), int(j), v)
                for i, j, v in zip(self.observers, self.targets, self.values)
            )
        return self._items

    def __len__(self) -> int:
        return len(self.observers)

    def __iter__(self):
        return iter(self.items)

    @classmethod
    def from_arrays(cls, observers: np.ndarray, targets: np.ndarray,
                    values: np.ndarray) -> "MeasurementSet":
        """Fast path for bulk construction from index/value arrays (skips
        per-item validation; pairs must already be unique)."""
        out = cls.__new__(cls)
        out.observers = np.asarray(observers, dtype=np.intp)
        out.targets = np.asarray(targets, dtype=np.intp)
        out.values = np.asarray(values, dtype=float).reshape(-1, 3)
        out._items = None
        return out

    @classmethod
    def full_graph(cls, values_by_pair) -> "MeasurementSet":
        """Build from a ``{(i, j): 3-vector}`` mapping, observer-major order."""
        n = max(max(i, j) for i, j in values_by_pair) + 1
        items = [
            RelPosMeasurement(i, j, values_by_pair[(i, j)])
            for i in range(n)
            for j in range(n)
            if i != j
        ]
        return cls(items)


def propagate_pose(pose: RobotPose, u: OdometryInput, noise: np.ndarray,
                   dt: float) -> RobotPose:
    """One motion-model step for a single robot."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    noise = np.asarray(noise, dtype=float).reshape(4)
    p = pose.position + rot_z(pose.yaw.radians) @ (u.v + noise[:3]) * dt
    psi = wrap_angle(pose.yaw.radians + (u.omega + noise[3]) * dt)
    return RobotPose(p, Angle(psi))


def propagate_fleet(mean: np.ndarray, odom: np.ndarray, dt: float) -> np.ndarray:
    """Noiseless motion step for a robot-major ``4n`` mean vector.

    ``odom`` is ``(n, 4)`` rows of ``[v (3), omega]``.
    """
    n = mean.size // 4
    out = mean.copy()
    yaws = mean[3::4]
    c, s = np.cos(yaws), np.sin(yaws)
    view = out.reshape(n, 4)
    view[:, 0] += (c * odom[:, 0] - s * odom[:, 1]) * dt
    view[:, 1] += (s * odom[:, 0] + c * odom[:, 1]) * dt
    view[:, 2] += odom[:, 2] * dt
    out[3::4] = np.pi - np.mod(np.pi - (yaws + odom[:, 3] * dt), 2.0 * np.pi)
    return out


def motion_jacobians(prev_estimate: RobotPose, predicted: RobotPose,
                     dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Error-state propagation Jacobians ``(F_i, G_i)`` for one robot.

    ``F_i`` couples the yaw error into position through the displacement
    actually traveled; ``G_i`` maps odometry noise through the body rotation
    at the previous estimate.
    """
    disp = predicted.position - prev_estimate.position
    f = np.eye(4)
    f[:3, 3] = ROT_Z_GEN @ disp
    g = np.zeros((4, 4))
    g[:3, :3] = rot_z(prev_estimate.yaw.radians) * dt
    g[3, 3] = dt
    return f, g


def predict_rel_pos(state: FleetState | np.ndarray, i: int, j: int) -> np.ndarray:
    """Noiseless relative position of robot ``j`` in robot ``i``'s body frame."""
    if i == j:
        raise ValueError("observer and target must differ")
    vec = fleet_vector(state)
    p_i, p_j = vec[4 * i : 4 * i + 3], vec[4 * j : 4 * j + 3]
    return rot_z(vec[4 * i + 3]).T @ (p_j - p_i)


def predict_measurements(mean: np.ndarray, observers: np.ndarray,
                         targets: np.ndarray,
                         ct_obs: np.ndarray | None = None) -> np.ndarray:
    """Batched noiseless measurement predictions, shape ``(m, 3)``.

    ``ct_obs`` may carry precomputed per-measurement observer rotations
    (transposed) to avoid rebuilding them.
    """
    pos = mean.reshape(-1, 4)[:, :3]
    d = pos[targets] - pos[observers]
    if ct_obs is None:
        return np.einsum("mji,mj->mi", rot_z_batch(mean[3::4])[observers], d)
    return np.einsum("mij,mj->mi", ct_obs, d)


def measurement_jacobian(estimate: FleetState | np.ndarray, i: int,
                         j: int) -> np.ndarray:
    """Error-state Jacobian ``(3, 4n)`` of one relative-position measurement."""
    if i == j:
        raise ValueError("observer and target must differ")
    vec = fleet_vector(estimate)
    n = vec.size // 4
    p_i, p_j = vec[4 * i : 4 * i + 3], vec[4 * j : 4 * j + 3]
    ct = rot_z(vec[4 * i + 3]).T
    h = np.zeros((3, 4 * n))
    h[:, 4 * i : 4 * i + 3] = -ct
    h[:, 4 * i + 3] = -ct @ (ROT_Z_GEN @ (p_j - p_i))
    h[:, 4 * j : 4 * j + 3] = ct
    return h


def stack_fleet_propagation(per_robot: Sequence[tuple[np.ndarray, np.ndarray]]
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Block-diagonal fleet ``(F, G)`` from per-robot ``(F_i, G_i)`` pairs."""
    n = len(per_robot)
    f = np.zeros((4 * n, 4 * n))
    g = np.zeros((4 * n, 4 * n))
    for i, (fi, gi) in enumerate(per_robot):
        f[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = fi
        g[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = gi
    return f, g


def fleet_propagation_jacobian(displacements: np.ndarray) -> np.ndarray:
    """Block-diagonal fleet ``F`` directly from per-robot displacements
    ``(n, 3)`` (each row: predicted minus previous position)."""
    n = displacements.shape[0]
    f = np.eye(4 * n)
    rows = np.arange(n)
    f[4 * rows, 4 * rows + 3] = -displacements[:, 1]
    f[4 * rows + 1, 4 * rows + 3] = displacements[:, 0]
    return f


def fleet_noise_jacobian(yaws: np.ndarray, dt: float) -> np.ndarray:
    """Block-diagonal stacked noise Jacobian ``G`` (``4n x 4n``)."""
    n = yaws.size
    out = np.zeros((4 * n, 4 * n))
    rots = rot_z_batch(yaws) * dt
    for i in range(n):
        out[4 * i : 4 * i + 3, 4 * i : 4 * i + 3] = rots[i]
        out[4 * i + 3, 4 * i + 3] = dt
    return out


def fleet_process_noise(yaws: np.ndarray, q_blocks: np.ndarray,
                        dt: float) -> np.ndarray:
    """Block-diagonal ``G Q G^T`` for the fleet (``4n x 4n``)."""
    n = yaws.size
    g = np.zeros((n, 4, 4))
    g[:, :3, :3] = rot_z_batch(yaws) * dt
    g[:, 3, 3] = dt
    blocks = np.einsum("nij,njk,nlk->nil", g, q_blocks, g)
    out = np.zeros((4 * n, 4 * n))
    for i in range(n):
        out[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = blocks[i]
    return out


def observer_rotations(vec: np.ndarray, observers: np.ndarray) -> np.ndarray:
    """Per-measurement transposed body rotations ``rot_z(psi_obs)^T``,
    shape ``(m, 3, 3)``."""
    cts = np.transpose(rot_z_batch(vec[3::4]), (0, 2, 1))
    return cts[observers]


@lru_cache(maxsize=64)
def _h_r_template(n: int, obs_bytes: bytes, tgt_bytes: bytes) -> np.ndarray:
    """Constant part of the relative-frame Jacobian stack: the +-I3 blocks
    of every measurement row, shaped ``(m, 3, 4n)``. Only the yaw columns
    depend on the state."""
    obs = np.frombuffer(obs_bytes, dtype=np.intp)
    tgt = np.frombuffer(tgt_bytes, dtype=np.intp)
    template = np.zeros((obs.size, 3, 4 * n))
    for r, (i, j) in enumerate(zip(obs, tgt)):
        template[r, :, 4 * i : 4 * i + 3] = np.eye(3)
        template[r, :, 4 * j : 4 * j + 3] = -np.eye(3)
    template.setflags(write=False)
    return template


def assemble_h(vec: np.ndarray, observers: np.ndarray, targets: np.ndarray,
               ct_obs: np.ndarray | None = None) -> np.ndarray:
    """Stacked measurement Jacobian ``H`` (``3m x 4n``) at the state ``vec``."""
    n = vec.size // 4
    m = observers.size
    pos = vec.reshape(n, 4)[:, :3]
    if ct_obs is None:
        ct_obs = observer_rotations(vec, observers)
    h_r = np.array(_h_r_template(n, observers.tobytes(), targets.tobytes()))
    d = pos[targets] - pos[observers]
    jd = np.empty_like(d)
    jd[:, 0] = -d[:, 1]
    jd[:, 1] = d[:, 0]
    jd[:, 2] = 0.0
    h_r[np.arange(m)[:, None], np.arange(3)[None, :],
        (4 * observers + 3)[:, None]] = jd
    h = -np.einsum("mij,mjk->mik", ct_obs, h_r)
    return h.reshape(3 * m, 4 * n)


def stack_measurement_jacobian(estimate: FleetState | np.ndarray,
                               mset: MeasurementSet
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Stacked measurement Jacobian ``H`` (``3m x 4n``) and the block-diagonal
    body-frame factor ``Gamma`` (``3m x 3m``, one ``-rot_z(psi_obs)^T`` block
    per measurement) such that ``H = Gamma @ H_r``."""
    if len(mset) == 0:
        raise ValueError("measurement set is empty")
    vec = fleet_vector(estimate)
    m = len(mset)
    ct_obs = observer_rotations(vec, mset.observers)
    h = assemble_h(vec, mset.observers, mset.targets, ct_obs)
    gamma = np.zeros((3 * m, 3 * m))
    gamma.reshape(m, 3, m, 3)[np.arange(m), :, np.arange(m), :] = -ct_obs
    return h, gamma
