"""Planar-rotation geometry and the fleet value types.

State convention: each robot carries a 3D position (meters, global frame) and
a yaw angle about the global z-axis. A fleet of ``n`` robots is laid out
robot-major as a ``4n`` vector ``[p_x, p_y, p_z, psi]`` per robot. Yaw is
always wrapped to the half-open interval ``(-pi, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Generator of z-axis rotations: d/dpsi rot_z(psi) = ROT_Z_GEN @ rot_z(psi).
ROT_Z_GEN = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
ROT_Z_GEN.setflags(write=False)


def wrap_angle(raw: float) -> float:
    """Wrap ``raw`` radians into ``(-pi, pi]``.

    Idempotent, and maps every representative of the same angle class to the
    same value (e.g. ``-3*pi -> pi``).
    """
    if not math.isfinite(raw):
        raise ValueError(f"angle must be finite, got {raw!r}")
    # pi - ((pi - x) mod 2pi) lands exactly in (-pi, pi] with -pi -> pi.
    return math.pi - ((math.pi - raw) % TWO_PI)


def wrap_angles(raw: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle` (no finiteness check)."""
    return np.pi - np.mod(np.pi - np.asarray(raw, dtype=float), TWO_PI)


def rot_z(psi: float) -> np.ndarray:
    """Rotation matrix about the z-axis by ``psi`` radians."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_batch(psis: np.ndarray) -> np.ndarray:
    """Stack of z-rotations, shape ``(len(psis), 3, 3)``."""
    psis = np.asarray(psis, dtype=float)
    out = np.zeros(psis.shape + (3, 3))
    c, s = np.cos(psis), np.sin(psis)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def rot_z_generator() -> np.ndarray:
    """The constant generator ``d/dpsi rot_z = G @ rot_z`` (fresh copy)."""
    return ROT_Z_GEN.copy()


@dataclass(frozen=True, slots=True)
class Angle:
    """A yaw angle, wrapped to ``(-pi, pi]`` on construction and arithmetic."""

    radians: float

    def __post_init__(self):
        object.__setattr__(self, "radians", wrap_angle(float(self.radians)))

    def __float__(self) -> float:
        return self.radians

    def __add__(self, other: "Angle | float") -> "Angle":
        return Angle(self.radians + float(other))

    __radd__ = __add__

    def __sub__(self, other: "Angle | float") -> "Angle":
        return Angle(self.radians - float(other))

    def __neg__(self) -> "Angle":
        return Angle(-self.radians)


def _as_position(value: Sequence[float] | np.ndarray) -> np.ndarray:
    pos = np.asarray(value, dtype=float).reshape(3).copy()
    if not np.all(np.isfinite(pos)):
        raise ValueError(f"position must be finite, got {pos}")
    pos.setflags(write=False)
    return pos


@dataclass(frozen=True, slots=True, eq=False)
class RobotPose:
    """Position (m, global frame) plus yaw of a single robot."""

    position: np.ndarray
    yaw: Angle

    def __post_init__(self):
        object.__setattr__(self, "position", _as_position(self.position))
        if not isinstance(self.yaw, Angle):
            object.__setattr__(self, "yaw", Angle(float(self.yaw)))

    def as_vector(self) -> np.ndarray:
        """``[p_x, p_y, p_z, psi]``."""
        return np.append(self.position, self.yaw.radians)


@dataclass(frozen=True, slots=True, eq=False)
class FleetState:
    """Ordered poses of all robots; the index order is fixed for a run."""

    poses: tuple[RobotPose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 2:
            raise ValueError("a fleet needs at least two robots")
        object.__setattr__(self, "poses", poses)

    @property
    def n(self) -> int:
        return len(self.poses)

    def to_vector(self) -> np.ndarray:
        """Robot-major ``4n`` vector."""
        return np.concatenate([p.as_vector() for p in self.poses])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "FleetState":
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size % 4 != 0:
            raise ValueError(f"state vector length {vec.size} is not 4n")
        poses = tuple(
            RobotPose(vec[4 * i : 4 * i + 3], Angle(vec[4 * i + 3]))
            for i in range(vec.size // 4)
        )
        return cls(poses)

    def positions(self) -> np.ndarray:
        """``(n, 3)`` array of positions."""
        return np.stack([p.position for p in self.poses])

    def yaws(self) -> np.ndarray:
        """``(n,)`` array of wrapped yaws."""
        return np.array([p.yaw.radians for p in self.poses])


def fleet_vector(state: "FleetState | np.ndarray") -> np.ndarray:
    """Accept either a :class:`FleetState` or a raw ``4n`` vector."""
    if isinstance(state, FleetState):
        return state.to_vector()
    vec = np.asarray(state, dtype=float).ravel()
    if vec.size % 4 != 0 or vec.size < 8:
        raise ValueError(f"state vector length {vec.size} is not 4n with n >= 2")
    return vec


@dataclass(frozen=True, slots=True, eq=False)
class FleetBelief:
    """Fleet mean plus its ``4n x 4n`` covariance (SI units)."""

    mean: FleetState
    covariance: np.ndarray

    def __post_init__(self):
        dim = 4 * self.mean.n
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (dim, dim):
            raise ValueError(f"covariance shape {cov.shape} != ({dim}, {dim})")
        check_covariance(cov)
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)

    @property
    def n(self) -> int:
        return self.mean.n


def check_covariance(cov: np.ndarray, *, sym_rtol: float = 1e-9,
                     psd_rtol: float = 1e-9) -> None:
    """Raise unless ``cov`` is symmetric (relative ``sym_rtol``) and PSD
    (minimum eigenvalue >= ``-psd_rtol`` times the maximum)."""
    scale = float(np.abs(cov).max()) or 1.0
    skew = float(np.abs(cov - cov.T).max())
    if skew > sym_rtol * scale:
        raise ValueError(f"covariance asymmetry {skew:.3e} exceeds {sym_rtol:.1e} relative")
    eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eigs[0] < -psd_rtol * max(eigs[-1], 0.0) - psd_rtol:
        raise ValueError(f"covariance not PSD: min eigenvalue {eigs[0]:.3e}")


@dataclass(frozen=True, slots=True, eq=False)
class ErrorState:
    """Robot-major ``4n`` error vector ``[p_err (3), psi_err (1)]`` per robot,
    with yaw components wrapped."""

    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=float).ravel().copy()
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    def robot(self, i: int) -> np.ndarray:
        return self.vector[4 * i : 4 * i + 4]


def error_state(truth: FleetState, estimate: FleetState) -> ErrorState:
    """Truth-minus-estimate error with wrapped yaw differences."""
    if truth.n != estimate.n:
        raise ValueError(f"fleet sizes differ: {truth.n} vs {estimate.n}")
    return ErrorState(error_vector(truth.to_vector(), estimate.to_vector()))


def error_vector(truth_vec: np.ndarray, estimate_vec: np.ndarray) -> np.ndarray:
    """Vectorized error: plain difference with yaw slots re-wrapped."""
    err = np.asarray(truth_vec, dtype=float) - np.asarray(estimate_vec, dtype=float)
    err[3::4] = wrap_angles(err[3::4])
    return err
