"""Numerical observability analysis over Jacobian windows.

Builds the stacked local observability matrix from a window of propagation
and measurement Jacobians, measures its numerical null-space dimension with
an SVD, and checks the span against the analytic unobservable directions
(global planar rotation plus global 3D translation, 4 degrees of freedom).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import ROT_Z_GEN, FleetState, fleet_vector


@dataclass(frozen=True, slots=True, eq=False)
class JacobianRecord:
    """Jacobians used by a filter at one step.

    ``f`` is the propagation Jacobian applied during the step's prediction,
    ``h`` the (possibly 0-row) measurement Jacobian used in its update, and
    ``mean`` the linearization state for ``h``.
    """

    step: int
    f: np.ndarray
    h: np.ndarray
    mean: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class JacobianWindow:
    """``ell + 1`` measurement Jacobians interleaved with ``ell``
    propagation Jacobians over a time window."""

    f_seq: tuple[np.ndarray, ...]
    h_seq: tuple[np.ndarray, ...]

    def __post_init__(self):
        f_seq = tuple(np.asarray(f, dtype=float) for f in self.f_seq)
        h_seq = tuple(np.asarray(h, dtype=float) for h in self.h_seq)
        if len(h_seq) != len(f_seq) + 1:
            raise ValueError(
                f"need len(h_seq) == len(f_seq) + 1, got {len(h_seq)} and {len(f_seq)}"
            )
        if not h_seq:
            raise ValueError("empty window")
        dim = h_seq[0].shape[1]
        for f in f_seq:
            if f.shape != (dim, dim):
                raise ValueError(f"propagation Jacobian shape {f.shape} != ({dim}, {dim})")
        for h in h_seq:
            if h.ndim != 2 or h.shape[1] != dim:
                raise ValueError(f"measurement Jacobian has {h.shape[1]} columns, expected {dim}")
        object.__setattr__(self, "f_seq", f_seq)
        object.__setattr__(self, "h_seq", h_seq)


@dataclass(frozen=True, slots=True, eq=False)
class NullspaceReport:
    """SVD-based null-space summary of one observability matrix."""

    dimension: int
    basis: np.ndarray
    residual: float
    singular_values: np.ndarray


def observability_matrix(window: JacobianWindow) -> np.ndarray:
    """Vertical stack ``[H_0; H_1 F_0; ...; H_l F_{l-1} ... F_0]``."""
    blocks = [window.h_seq[0]]
    prod = None
    for f, h in zip(window.f_seq, window.h_seq[1:]):
        prod = f if prod is None else f @ prod
        blocks.append(h @ prod)
    return np.vstack(blocks)


def nullspace_dim(o: np.ndarray, tol_ratio: float = 1e-8,
                  expected: np.ndarray | None = None) -> NullspaceReport:
    """Numerical null space of ``o``.

    Singular values below ``tol_ratio`` times the largest count as zero. The
    reported residual is ``max |o @ expected|`` when an expected basis is
    given, otherwise ``max |o @ basis|`` for the extracted basis.
    """
    o = np.asarray(o, dtype=float)
    if o.size == 0:
        raise ValueError("empty observability matrix")
    if not 0.0 < tol_ratio < 1.0:
        raise ValueError(f"tol_ratio must be in (0, 1), got {tol_ratio}")
    ncols = o.shape[1]
    _, svals, vh = np.linalg.svd(o, full_matrices=True)
    smax = svals[0] if svals.size else 0.0
    if smax == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(svals >= tol_ratio * smax))
    dim = ncols - rank
    basis = vh[rank:].T
    probe = expected if expected is not None else basis
    residual = float(np.abs(o @ probe).max()) if probe.size else 0.0
    return NullspaceReport(dim, basis, residual, svals)


def expected_nullspace(state: FleetState | np.ndarray) -> np.ndarray:
    """Analytic unobservable directions at ``state`` (``4n x 4``).

    Column 0 is the global-rotation orbit derivative (rotate every position
    about z, shift every yaw); columns 1-3 are global translation.
    """
    vec = fleet_vector(state)
    n = vec.size // 4
    basis = np.zeros((4 * n, 4))
    for i in range(n):
        basis[4 * i : 4 * i + 3, 0] = ROT_Z_GEN @ vec[4 * i : 4 * i + 3]
        basis[4 * i + 3, 0] = 1.0
        basis[4 * i : 4 * i + 3, 1:4] = np.eye(3)
    return basis


def canonical_unobservable_basis(n: int) -> np.ndarray:
    """Unit vectors spanning the trailing global block of the canonical
    coordinates (``4n x 4``)."""
    basis = np.zeros((4 * n, 4))
    basis[4 * n - 4 :, :] = np.eye(4)
    return basis


@dataclass(frozen=True, slots=True, eq=False)
class AuditResult:
    """Sliding-window null-space reports over a logged filter run."""

    window_starts: tuple[int, ...]
    reports: tuple[NullspaceReport, ...]
    first_deficient: int | None

    def dimensions(self) -> list[int]:
        return [r.dimension for r in self.reports]


def audit_filter_run(records: Sequence[JacobianRecord], window: int = 5,
                     tol_ratio: float = 1e-8,
                     canonical: bool = False) -> AuditResult:
    """Slide a fixed-length window over logged Jacobians and report the
    null-space dimension of each accumulated observability matrix.

    ``canonical`` selects the trailing-block basis for the residual check
    (for the decomposition-based filter, whose logged Jacobians live in the
    transformed coordinates); otherwise the analytic basis is evaluated at
    each window's linearization state. ``first_deficient`` is the step of
    the first window whose dimension drops below 4.
    """
    records = [r for r in records if r.h.shape[0] > 0]
    if not records:
        raise ValueError("no records with measurements to audit")
    window = min(window, len(records) - 1)
    starts: list[int] = []
    reports: list[NullspaceReport] = []
    first_deficient: int | None = None
    for s in range(len(records) - window):
        h_seq = tuple(records[s + k].h for k in range(window + 1))
        f_seq = tuple(records[s + k].f for k in range(1, window + 1))
        o = observability_matrix(JacobianWindow(f_seq, h_seq))
        if canonical:
            expected = canonical_unobservable_basis(o.shape[1] // 4)
        else:
            expected = expected_nullspace(records[s].mean)
        rep = nullspace_dim(o, tol_ratio, expected)
        starts.append(records[s].step)
        reports.append(rep)
        if first_deficient is None and rep.dimension < 4:
            first_deficient = records[s].step
    return AuditResult(tuple(starts), tuple(reports), first_deficient)
