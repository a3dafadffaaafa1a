"""Covariance-kernel backend selection.

The compiled extension (``kdcl._speedups``) is preferred when it imported
successfully; otherwise the pure-NumPy implementation is used. Setting the
environment variable ``KDCL_PURE_PYTHON=1`` before import forces the pure
backend (used by the backend-comparison benchmark and tests).

Both backends implement:

* ``propagate_cov(p, f, gqg)`` -> ``F P F^T + GQG`` (re-symmetrized)
* ``update_cov(p, h, r, innov)`` -> ``(dx, p_new)`` Kalman update
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_pure

_impl = _kernels_pure
BACKEND = "python"

if os.environ.get("KDCL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _speedups as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"


def backend_name() -> str:
    """Active backend: ``"compiled"`` or ``"python"``."""
    return BACKEND


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=float)


def propagate_cov(p: np.ndarray, f: np.ndarray, gqg: np.ndarray) -> np.ndarray:
    return _impl.propagate_cov(_c(p), _c(f), _c(gqg))


def update_cov(p: np.ndarray, h: np.ndarray, r: np.ndarray,
               innov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _impl.update_cov(_c(p), _c(h), _c(r), _c(innov.ravel()))
