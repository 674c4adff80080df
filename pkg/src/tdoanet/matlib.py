"""Dense real-matrix helpers used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here only add the validation the rest of the package relies on (finite
entries, squareness) and translate LAPACK failures into
:class:`~tdoanet.errors.NumericalError`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg

from tdoanet.errors import ConfigError, NumericalError

Mat = np.ndarray


def as_mat(a, name: str = "matrix") -> Mat:
    """Return ``a`` as a finite 2-D float array (a copy is made only if needed)."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ConfigError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ConfigError(f"{name} contains NaN or Inf")
    return m


def _square(a, name: str = "matrix") -> Mat:
    m = as_mat(a, name)
    if m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be square, got shape {m.shape}")
    return m


def kron(a, b) -> Mat:
    return np.kron(as_mat(a, "a"), as_mat(b, "b"))


def block_diag(blocks: Sequence) -> Mat:
    if len(blocks) == 0:
        raise ConfigError("block_diag needs at least one block")
    return scipy.linalg.block_diag(*[as_mat(b, "block") for b in blocks])


def eigvals(a) -> np.ndarray:
    """All eigenvalues of a real square matrix.

    LAPACK ``dgeev`` (Hessenberg reduction followed by implicitly shifted
    Francis QR on the real Schur form). A failure to converge is raised,
    never silently ignored.
    """
    m = _square(a)
    try:
        return np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue iteration failed to converge: {exc}") from exc


def spectral_radius(a) -> float:
    """Largest eigenvalue modulus."""
    lam = eigvals(a)
    if lam.size == 0:
        return 0.0
    return float(np.max(np.abs(lam)))


def mat_pow(a, e: int) -> Mat:
    """``a**e`` by repeated squaring; ``e == 0`` gives the identity."""
    m = _square(a)
    if int(e) != e or e < 0:
        raise ConfigError(f"exponent must be a non-negative integer, got {e}")
    return np.linalg.matrix_power(m, int(e))
