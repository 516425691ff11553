"""Dense/sparse complex kernels shared by the solvers.

Matrices are plain ``numpy.ndarray`` (complex128) or ``scipy.sparse`` CSR
matrices; nothing here wraps them in custom containers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

__all__ = [
    "EigenDecomposition",
    "HermiticityError",
    "hermitian_eig",
    "kron",
    "to_sparse",
    "to_dense",
    "dagger",
    "rk4_step",
    "MAX_KRON_DIM",
    "SPARSE_DROP_TOL",
]

MAX_KRON_DIM = 1 << 20
SPARSE_DROP_TOL = 1e-15
PHASE_ZERO_TOL = 1e-12


class HermiticityError(ValueError):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a Hermitian matrix, eigenvalues in descending order.

    ``vectors[:, r]`` is the eigenvector belonging to ``values[r]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)
        self.vectors.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def reconstruct(self) -> np.ndarray:
        v = self.vectors
        return (v * self.values) @ v.conj().T


def to_dense(a) -> np.ndarray:
    if sp.issparse(a):
        return a.toarray()
    return np.asarray(a)


def to_sparse(a, drop_tol: float = SPARSE_DROP_TOL) -> sp.csr_matrix:
    """CSR copy of `a` with entries below ``drop_tol * max|a|`` removed."""
    m = sp.csr_matrix(a, dtype=complex)
    if m.nnz:
        cutoff = drop_tol * np.abs(m.data).max()
        m.data[np.abs(m.data) <= cutoff] = 0.0
        m.eliminate_zeros()
    m.sum_duplicates()
    m.sort_indices()
    return m


def dagger(a):
    return a.conj().T


def _fix_phases(vectors: np.ndarray) -> np.ndarray:
    # first component with magnitude > PHASE_ZERO_TOL made real-positive
    mag = np.abs(vectors)
    first = np.argmax(mag > PHASE_ZERO_TOL, axis=0)
    pivots = vectors[first, np.arange(vectors.shape[1])]
    phases = np.ones_like(pivots)
    nz = np.abs(pivots) > PHASE_ZERO_TOL
    phases[nz] = np.abs(pivots[nz]) / pivots[nz]
    return vectors * phases


def hermitian_eig(a, hermiticity_tol: float = 1e-10) -> EigenDecomposition:
    """Eigendecomposition of a Hermitian matrix.

    Parameters
    ----------
    a : array_like or sparse matrix
        Square matrix. Its anti-Hermitian part may not exceed
        ``hermiticity_tol * max|a|`` entrywise.
    hermiticity_tol : float
        Relative tolerance on ``max|a - a^H|``.

    Returns
    -------
    EigenDecomposition
        Eigenvalues sorted descending; each eigenvector carries the phase
        convention that its first significant component is real positive.
    """
    a = to_dense(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"hermitian_eig needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = np.abs(a).max() if a.size else 0.0
    asym = np.abs(a - a.conj().T).max() if a.size else 0.0
    if asym > hermiticity_tol * max(scale, np.finfo(float).tiny):
        raise HermiticityError(
            f"matrix is not Hermitian: max|A - A^H| = {asym:.3e} (scale {scale:.3e})"
        )
    h = 0.5 * (a + a.conj().T)
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RuntimeError(f"eigensolver failed to converge: {exc}") from exc
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = _fix_phases(v[:, order].astype(complex, copy=False))
    return EigenDecomposition(values=np.ascontiguousarray(w), vectors=np.ascontiguousarray(v))


def kron(a, b, max_dim: int = MAX_KRON_DIM):
    """Kronecker product; sparse if either operand is sparse.

    Entry ``(i*rb + k, j*cb + l)`` equals ``a[i, j] * b[k, l]``.
    """
    ra, ca = a.shape
    rb, cb = b.shape
    if ra * rb > max_dim or ca * cb > max_dim:
        raise ValueError(
            f"kron result {ra * rb}x{ca * cb} exceeds the dimension cap {max_dim}"
        )
    if sp.issparse(a) or sp.issparse(b):
        return sp.kron(a, b, format="csr")
    a = np.asarray(a)
    b = np.asarray(b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kron operands must be finite")
    return np.kron(a, b)


def rk4_step(f: Callable, y, t: float, dt: float):
    """One classical fourth-order Runge-Kutta step of ``y' = f(t, y)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3 = f(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4 = f(t + dt, y + dt * k3)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise FloatingPointError("derivative evaluated to a non-finite value")
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
