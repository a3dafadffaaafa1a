"""Observable/unobservable coordinate decomposition for the fleet error state.

A time-varying linear change of coordinates ``z = T x_err`` splits the
``4n``-dimensional fleet error state into:

* ``n - 1`` observable blocks, one per robot ``i >= 2``: the position of
  robot 1 relative to robot ``i`` (expressed with a yaw-coupling term) and
  the yaw difference ``psi_i - psi_1``;
* a final 4-dimensional unobservable block: the absolute yaw of robot 1
  followed by the absolute position of robot 1.

Canonical layout of ``z`` (robot-major)::

    [z_p_1 (3), z_psi_1 (1), ..., z_p_{n-1}, z_psi_{n-1}, z_psi_n (1), z_p_n (3)]

where block ``b`` (0-based) belongs to robot ``b + 2`` and the trailing
``z_psi_n / z_p_n`` pair is the global (anchor) component.

In these coordinates the stacked propagation and measurement Jacobians take
a canonical form whose only coupling from the global-yaw coordinate into the
observable blocks is through small between-robot differences of position
corrections (the ``delta`` terms below). Annihilating those terms yields the
Jacobians used by the decomposition-based filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import ROT_Z_GEN, FleetState, fleet_vector, rot_z_batch
from .models import MeasurementSet, fleet_noise_jacobian


@dataclass(frozen=True, slots=True)
class CanonicalLayout:
    """Index bookkeeping for the transformed coordinates."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("layout needs at least two robots")

    @property
    def dim(self) -> int:
        return 4 * self.n

    def observable_block(self, robot: int) -> slice:
        """Columns of the observable block belonging to ``robot`` (>= 1)."""
        if not 1 <= robot < self.n:
            raise ValueError(f"robot {robot} has no observable block")
        return slice(4 * (robot - 1), 4 * robot)

    @property
    def global_yaw(self) -> int:
        return 4 * self.n - 4

    @property
    def global_pos(self) -> slice:
        return slice(4 * self.n - 3, 4 * self.n)

    @property
    def unobservable(self) -> slice:
        return slice(4 * self.n - 4, 4 * self.n)


@dataclass(frozen=True, slots=True, eq=False)
class CanonicalBelief:
    """Covariance expressed in the transformed coordinates."""

    layout: CanonicalLayout
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (self.layout.dim, self.layout.dim):
            raise ValueError(f"covariance shape {cov.shape} != layout dim {self.layout.dim}")
        object.__setattr__(self, "covariance", cov)


class CorrectionDeltas:
    """Between-robot differences of position corrections.

    ``delta(i, j)`` is the yaw-generator image of
    ``(correction of robot i) - (correction of robot j)`` where a robot's
    correction is its predicted minus updated position. Antisymmetric by
    construction: ``delta(i, j) = -delta(j, i)`` and ``delta(i, i) = 0``.
    """

    __slots__ = ("n", "_corrections")

    def __init__(self, corrections: np.ndarray):
        corrections = np.asarray(corrections, dtype=float)
        if corrections.ndim != 2 or corrections.shape[1] != 3:
            raise ValueError("corrections must be (n, 3)")
        self.n = corrections.shape[0]
        self._corrections = corrections

    @classmethod
    def from_states(cls, predicted: FleetState | np.ndarray,
                    updated: FleetState | np.ndarray) -> "CorrectionDeltas":
        pred = fleet_vector(predicted).reshape(-1, 4)[:, :3]
        upd = fleet_vector(updated).reshape(-1, 4)[:, :3]
        if pred.shape != upd.shape:
            raise ValueError("predicted/updated fleet sizes differ")
        return cls(pred - upd)

    @classmethod
    def zero(cls, n: int) -> "CorrectionDeltas":
        return cls(np.zeros((n, 3)))

    def delta(self, i: int, j: int) -> np.ndarray:
        """3-vector column coupling the global-yaw coordinate."""
        return ROT_Z_GEN @ (self._corrections[i] - self._corrections[j])

    def delta_batch(self, i_idx: np.ndarray, j_idx: np.ndarray) -> np.ndarray:
        """Rows of ``delta(i, j)`` for index arrays, shape ``(m, 3)``."""
        d = self._corrections[i_idx] - self._corrections[j_idx]
        out = np.empty_like(d)
        out[:, 0] = -d[:, 1]
        out[:, 1] = d[:, 0]
        out[:, 2] = 0.0
        return out

    @property
    def is_zero(self) -> bool:
        return not np.any(self._corrections)


def correction_delta(predicted: FleetState | np.ndarray,
                     updated: FleetState | np.ndarray, i: int, j: int) -> np.ndarray:
    """The ``(i, j)`` correction-difference column (3-vector)."""
    return CorrectionDeltas.from_states(predicted, updated).delta(i, j)


def build_transform(estimate: FleetState | np.ndarray) -> np.ndarray:
    """The ``4n x 4n`` change of coordinates ``z = T x_err`` at ``estimate``.

    Rows follow the canonical layout; the matrix is invertible for any
    finite estimate (unit diagonal blocks up to sign and permutation).
    """
    vec = fleet_vector(estimate)
    n = vec.size // 4
    pos = vec.reshape(n, 4)[:, :3]
    dim = 4 * n
    t = np.zeros((dim, dim))
    eye3 = np.eye(3)
    for r in range(1, n):
        b0 = 4 * (r - 1)
        t[b0 : b0 + 3, 0:3] = eye3
        t[b0 : b0 + 3, 3] = ROT_Z_GEN @ (pos[r] - pos[0])
        t[b0 : b0 + 3, 4 * r : 4 * r + 3] = -eye3
        t[b0 + 3, 3] = -1.0
        t[b0 + 3, 4 * r + 3] = 1.0
    t[dim - 4, 3] = 1.0
    t[dim - 3 : dim, 0:3] = eye3
    return t


def invert_transform(estimate: FleetState | np.ndarray) -> np.ndarray:
    """Closed-form inverse of :func:`build_transform` at the same estimate.

    Reconstructs robot 1's error from the trailing block, then
    back-substitutes every other robot's block. Exact up to rounding; a
    dense LU inverse is kept as a cross-check in the test suite.
    """
    vec = fleet_vector(estimate)
    n = vec.size // 4
    pos = vec.reshape(n, 4)[:, :3]
    dim = 4 * n
    tinv = np.zeros((dim, dim))
    eye3 = np.eye(3)
    tinv[0:3, dim - 3 : dim] = eye3
    tinv[3, dim - 4] = 1.0
    for r in range(1, n):
        b0 = 4 * (r - 1)
        tinv[4 * r : 4 * r + 3, dim - 3 : dim] = eye3
        tinv[4 * r : 4 * r + 3, dim - 4] = ROT_Z_GEN @ (pos[r] - pos[0])
        tinv[4 * r : 4 * r + 3, b0 : b0 + 3] = -eye3
        tinv[4 * r + 3, b0 + 3] = 1.0
        tinv[4 * r + 3, dim - 4] = 1.0
    return tinv


def canonical_propagation_jacobian(displacements: np.ndarray,
                                   deltas: CorrectionDeltas) -> np.ndarray:
    """Canonical-coordinate propagation Jacobian.

    ``displacements`` is ``(n, 3)``: each robot's predicted position minus
    its previous updated position. Observable diagonal blocks couple each
    yaw difference into its relative position through ``-J d_i``; the
    global block advances robot 1's absolute error; the only
    observable-from-global coupling is the correction-difference column.

    Note on that column: expanding ``T_k F T_{k-1}^{-1}`` exactly places
    ``delta(1, i)`` (anchor first) in robot ``i``'s rows.
    """
    disp = np.asarray(displacements, dtype=float)
    n = disp.shape[0]
    dim = 4 * n
    f = np.zeros((dim, dim))
    eye3 = np.eye(3)
    for r in range(1, n):
        b0 = 4 * (r - 1)
        f[b0 : b0 + 3, b0 : b0 + 3] = eye3
        f[b0 : b0 + 3, b0 + 3] = -(ROT_Z_GEN @ disp[r])
        f[b0 + 3, b0 + 3] = 1.0
        f[b0 : b0 + 3, dim - 4] = deltas.delta(0, r)
    f[dim - 4, dim - 4] = 1.0
    f[dim - 3 : dim, dim - 4] = ROT_Z_GEN @ disp[0]
    f[dim - 3 : dim, dim - 3 : dim] = eye3
    return f


def canonical_measurement_jacobian(estimate: FleetState | np.ndarray,
                                   mset: MeasurementSet,
                                   deltas: CorrectionDeltas) -> np.ndarray:
    """Canonical-coordinate measurement Jacobian (``3m x 4n``).

    ``estimate`` is the predicted fleet state. The trailing global-position
    columns are structurally zero; the global-yaw column carries only the
    correction-difference terms, so with ``deltas`` zero the matrix
    annihilates the whole unobservable block.
    """
    if len(mset) == 0:
        raise ValueError("measurement set is empty")
    vec = fleet_vector(estimate)
    n = vec.size // 4
    obs, tgt = mset.observers, mset.targets
    m = len(mset)
    dim = 4 * n
    pos = vec.reshape(n, 4)[:, :3]
    ct_obs = np.transpose(rot_z_batch(vec[3::4]), (0, 2, 1))[obs]
    blocks = np.array(_canonical_template(n, obs.tobytes(), tgt.tobytes()))
    obs_on = obs >= 1
    if np.any(obs_on):
        d = pos[tgt[obs_on]] - pos[obs[obs_on]]
        jd = np.empty_like(d)
        jd[:, 0] = -d[:, 1]
        jd[:, 1] = d[:, 0]
        jd[:, 2] = 0.0
        blocks[np.arange(m)[obs_on, None], np.arange(3)[None, :],
               (4 * (obs[obs_on] - 1) + 3)[:, None]] = jd
    if not deltas.is_zero:
        blocks[:, :, dim - 4] = deltas.delta_batch(tgt, obs)
    h = -np.einsum("mij,mjk->mik", ct_obs, blocks)
    return h.reshape(3 * m, dim)


@lru_cache(maxsize=64)
def _canonical_template(n: int, obs_bytes: bytes, tgt_bytes: bytes) -> np.ndarray:
    """Constant +-I3 part of the canonical measurement stack, ``(m, 3, 4n)``
    (the anchor robot has no observable block of its own)."""
    obs = np.frombuffer(obs_bytes, dtype=np.intp)
    tgt = np.frombuffer(tgt_bytes, dtype=np.intp)
    template = np.zeros((obs.size, 3, 4 * n))
    for r, (i, j) in enumerate(zip(obs, tgt)):
        if j >= 1:
            template[r, :, 4 * (j - 1) : 4 * (j - 1) + 3] = np.eye(3)
        if i >= 1:
            template[r, :, 4 * (i - 1) : 4 * (i - 1) + 3] = -np.eye(3)
    template.setflags(write=False)
    return template


def kd_jacobians(prev_mean: FleetState | np.ndarray,
                 predicted: FleetState | np.ndarray,
                 mset: MeasurementSet, dt: float
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Annihilated canonical Jacobians for one filter step.

    Returns ``(F_can, G_can, H_can)`` with the correction-difference
    couplings forced to zero: ``F_can`` from the predicted-minus-previous
    displacements, ``G_can = T(predicted) @ G`` with ``G`` the stacked noise
    Jacobian at the previous yaws, and ``H_can`` at the predicted estimate
    (zero rows if the measurement set is empty).
    """
    prev = fleet_vector(prev_mean)
    pred = fleet_vector(predicted)
    n = prev.size // 4
    zero = CorrectionDeltas.zero(n)
    disp = (pred - prev).reshape(n, 4)[:, :3]
    f_can = canonical_propagation_jacobian(disp, zero)
    g_can = build_transform(pred) @ fleet_noise_jacobian(prev[3::4], dt)
    if len(mset):
        h_can = canonical_measurement_jacobian(pred, mset, zero)
    else:
        h_can = np.zeros((0, 4 * n))
    return f_can, g_can, h_can
