"""Dense complex linear algebra on small matrices.

Conventions used throughout the package:

* matrices and vectors are ``numpy.complex128`` arrays in C (row-major)
  order; state vectors are 1-D arrays,
* operators act from the left, ``A @ psi``,
* everything here is a pure function of immutable inputs and safe to call
  from any number of workers.

Dimensions stay small by design (system dimension below ~64, exact-chain
dimension ``2**n * d`` with ``n <= 10``), so accuracy and robustness are
favoured over speed everywhere.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionOverflow

# Largest matrix dimension kron() will produce.  2**10 chain qubits times a
# 64-dimensional system is the intended ceiling.
MAX_KRON_DIM = 1 << 17


def cvector(entries) -> np.ndarray:
    """Validate and return a complex state vector (1-D, finite, length >= 1)."""
    v = np.asarray(entries, dtype=complex)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def cmatrix(entries) -> np.ndarray:
    """Validate and return a complex matrix (2-D, finite entries)."""
    m = np.asarray(entries, dtype=complex)
    if m.ndim != 2 or m.size < 1:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"dimension mismatch in matmul: {a.shape} x {b.shape}")
    return a @ b


def kron(a: np.ndarray, b: np.ndarray, max_dim: int = MAX_KRON_DIM) -> np.ndarray:
    """Kronecker product ``a (x) b``.

    The element convention is ``(a (x) b)[i*rb + k, j*cb + l] = a[i, j] * b[k, l]``,
    i.e. the first factor indexes the coarse blocks.  Raises
    :class:`DimensionOverflow` when the result would exceed ``max_dim`` rows
    or columns.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    rows = a.shape[0] * b.shape[0]
    cols = (a.shape[1] if a.ndim > 1 else 1) * (b.shape[1] if b.ndim > 1 else 1)
    if rows > max_dim or cols > max_dim:
        raise DimensionOverflow(f"kron result {rows}x{cols} exceeds maximum {max_dim}")
    return np.kron(a, b)


def matexp(a: np.ndarray, scale: complex = 1.0) -> np.ndarray:
    """Matrix exponential ``exp(scale * a)`` by scaling and squaring.

    The scaled matrix is brought below Frobenius norm 0.5 by repeated
    halving, expanded in a truncated Taylor series (order >= 8, in practice
    run to machine precision), and squared back up.  For anti-Hermitian
    ``scale * a`` the result is unitary to better than 1e-10.

    Parameters
    ----------
    a : ndarray
        Square matrix.
    scale : complex
        Scalar multiplied into the exponent.

    Returns
    -------
    ndarray
        ``exp(scale * a)``.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matexp requires a square matrix, got shape {a.shape}")
    m = scale * a
    if not np.all(np.isfinite(m)):
        raise ValueError("matexp argument has non-finite entries")

    norm = np.linalg.norm(m)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        m = m / (2.0 ** squarings)

    d = a.shape[0]
    result = np.eye(d, dtype=complex)
    term = np.eye(d, dtype=complex)
    # With ||m|| <= 0.5 the series reaches machine precision well before
    # k = 25; the order-8 minimum is always exceeded.
    for k in range(1, 26):
        term = term @ m / k
        result = result + term
        if np.linalg.norm(term) < 1e-18 * max(np.linalg.norm(result), 1.0):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def trace(a: np.ndarray) -> complex:
    """Trace of a square matrix."""
    a = np.asarray(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"trace requires a square matrix, got shape {a.shape}")
    return complex(np.trace(a))


def adjoint(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return np.asarray(a).conj().T


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Trace distance ``0.5 * sum |eig(a - b)|``.

    The difference is symmetrized before diagonalization, so tiny
    non-Hermitian numerical residue is tolerated.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"trace_distance requires equal square shapes, got {a.shape}, {b.shape}")
    diff = a - b
    herm = 0.5 * (diff + diff.conj().T)
    eigs = np.linalg.eigvalsh(herm)
    return float(0.5 * np.sum(np.abs(eigs)))


def purity(a: np.ndarray) -> float:
    """Purity ``Tr(a @ a) / Tr(a)**2``; equals 1 for any rank-1 projector scale."""
    a = np.asarray(a, dtype=complex)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"purity requires a square matrix, got shape {a.shape}")
    tr = np.trace(a)
    if abs(tr) < 1e-300:
        raise ValueError("purity is undefined for a zero-trace matrix")
    return float(np.real(np.trace(a @ a) / tr ** 2))


def min_eigenvalue(a: np.ndarray) -> float:
    """Smallest eigenvalue of the Hermitian part of ``a``."""
    a = np.asarray(a, dtype=complex)
    herm = 0.5 * (a + a.conj().T)
    return float(np.linalg.eigvalsh(herm)[0])
