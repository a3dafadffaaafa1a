"""Pure-NumPy covariance kernels (fallback backend).

Same contracts as the compiled backend in ``_speedups``: dense
symmetric-covariance propagation and the batched Kalman covariance/gain
update via a Cholesky solve of the innovation covariance.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericalError


def propagate_cov(p: np.ndarray, f: np.ndarray, gqg: np.ndarray) -> np.ndarray:
    """``F P F^T + GQG``, re-symmetrized."""
    out = f @ p @ f.T + gqg
    return 0.5 * (out + out.T)


def update_cov(p: np.ndarray, h: np.ndarray, r: np.ndarray,
               innov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One batched Kalman update.

    Returns ``(dx, p_new)`` where ``dx = K @ innov`` with
    ``K = P H^T (H P H^T + R)^-1`` and ``p_new = (I - K H) P``
    re-symmetrized. Raises :class:`NumericalError` if the innovation
    covariance is not positive definite.
    """
    hp = h @ p
    s = hp @ h.T + r
    try:
        chol = cho_factor(s, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError(f"innovation covariance not positive definite: {exc}") from exc
    kt = cho_solve(chol, hp, check_finite=False)  # K^T = S^-1 H P
    dx = kt.T @ innov
    p_new = p - kt.T @ hp
    return dx, 0.5 * (p_new + p_new.T)
