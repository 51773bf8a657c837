"""Dense real linear algebra substrate used by every other module.

Matrices are plain 2-D float64 ``numpy.ndarray`` objects in row-major
order. Factorizations are delegated to LAPACK through numpy/scipy; this
module owns the contracts (jitter escalation, ordering, error mapping)
rather than the inner loops.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceFailure, DimensionMismatch, NonFiniteValue, NotPositiveDefinite

# Gram matrices assembled from network Jacobians are routinely close to
# singular, so factorization failures escalate jitter geometrically
# between these two trace-scaled bounds before giving up.
JITTER_START_FACTOR = 1e-8
JITTER_CAP_FACTOR = 1e-2
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the (jittered) input."""

    lower: np.ndarray
    dim: int
    jitter: float = 0.0


@dataclass(frozen=True)
class SymEig:
    """Spectral decomposition with eigenvalues sorted in descending order."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


def check_symmetric(a, name="matrix", tol=SYMMETRY_TOL):
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > tol * scale:
        raise DimensionMismatch(f"{name} is not symmetric within {tol}")
    return a


def cholesky(a, jitter=0.0):
    """Factor a symmetric matrix as L @ L.T, escalating jitter on failure.

    The first attempt adds exactly ``jitter`` to the diagonal. If LAPACK
    rejects the matrix, the jitter restarts at
    ``JITTER_START_FACTOR * trace(a) / dim`` and grows tenfold per retry
    until ``JITTER_CAP_FACTOR * trace(a) / dim``, after which
    NotPositiveDefinite is raised.
    """
    a = check_symmetric(a, "cholesky input")
    n = a.shape[0]
    if n < 1:
        raise DimensionMismatch("cholesky needs dim >= 1")
    if jitter < 0:
        raise NotPositiveDefinite("jitter must be nonnegative")

    scale = float(np.trace(a)) / n
    if scale <= 0.0:
        scale = 1.0
    attempt = float(jitter)
    cap = JITTER_CAP_FACTOR * scale
    while True:
        try:
            mat = a if attempt == 0.0 else a + attempt * np.eye(n)
            lower = np.linalg.cholesky(mat)
            return CholeskyFactor(lower=lower, dim=n, jitter=attempt)
        except np.linalg.LinAlgError:
            nxt = JITTER_START_FACTOR * scale if attempt == 0.0 else attempt * 10.0
            if nxt <= attempt:
                nxt = attempt * 10.0
            if nxt > cap:
                raise NotPositiveDefinite(
                    f"matrix not positive definite after jitter cap {cap:.3e}"
                ) from None
            attempt = nxt


def solve_psd(factor, b):
    """Solve (L @ L.T) x = b for one or more right-hand sides."""
    lower = factor.lower
    b = np.asarray(b, dtype=np.float64)
    vector_input = b.ndim == 1
    if vector_input:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != factor.dim:
        raise DimensionMismatch(
            f"rhs has shape {b.shape}, expected ({factor.dim}, k)"
        )
    y = scipy.linalg.solve_triangular(lower, b, lower=True)
    x = scipy.linalg.solve_triangular(lower.T, y, lower=False)
    return x[:, 0] if vector_input else x


def logdet(factor):
    """Log-determinant of the factored matrix, from the diagonal of L."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def sym_eig(a):
    """Full spectral decomposition of a symmetric matrix.

    Returns eigenvalues in descending order with matching orthonormal
    eigenvector columns.
    """
    a = check_symmetric(a, "sym_eig input")
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"eigendecomposition failed: {exc}") from None
    order = np.argsort(values)[::-1]
    return SymEig(values=values[order], vectors=vectors[:, order])


def psd_sqrt(a, floor=0.0):
    """Symmetric square root of a PSD matrix, clipping eigenvalues at floor."""
    eig = sym_eig(a)
    vals = np.clip(eig.values, floor, None)
    return (eig.vectors * np.sqrt(vals)) @ eig.vectors.T


def rng_stream(seed):
    """Deterministic random stream; identical seed gives identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed)))
