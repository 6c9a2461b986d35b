import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from errors import ArgumentError, ContractViolation, DecompositionError

logger = logging.getLogger(__name__)

# ===============================================================
#  CONFIGURATION
# ===============================================================

EPS = np.finfo(np.float64).eps  # 2.22e-16
LAPACK_DRIVERS = ("gesdd", "gesvd")  # gesvd is the slower, more robust fallback


# ===============================================================
#  DENSE MATRIX HELPERS
# ===============================================================

def as_matrix(values, name="matrix"):
    """
    Validate and convert input to a 2-D float64 C-ordered array.

    Raises:
        ContractViolation: not 2-D, or contains NaN/Inf
    """
    matrix = np.ascontiguousarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return matrix


def frobenius(matrix):
    return float(np.linalg.norm(matrix, ord="fro"))


def normalized(matrix):
    """Divide by the Frobenius norm; returns None for an all-zero matrix."""
    norm = frobenius(matrix)
    if norm == 0.0:
        return None
    return matrix / norm


# ===============================================================
#  SVD AND FRIENDS
# ===============================================================

@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray   # m x k
    S: np.ndarray   # k, descending
    Vt: np.ndarray  # k x n

    def reconstruct(self):
        return (self.U * self.S) @ self.Vt


def svd(A):
    """
    Thin SVD with k = min(m, n) triplets, singular values descending.

    LAPACK's divide-and-conquer driver is tried first; when it fails to
    converge we retry with the QR-iteration driver before giving up.
    """
    A = as_matrix(A, "A")
    if A.size == 0:
        raise ArgumentError("svd needs a nonempty matrix")

    last_error = None
    for driver in LAPACK_DRIVERS:
        try:
            U, S, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver=driver)
            return SvdResult(U=U, S=S, Vt=Vt)
        except (np.linalg.LinAlgError, ValueError) as exc:
            logger.warning("svd driver %s failed on %s matrix: %s", driver, A.shape, exc)
            last_error = exc

    raise DecompositionError(f"SVD did not converge for {A.shape} matrix: {last_error}")


def default_rcond(A):
    return max(A.shape) * EPS


def pseudo_inverse(A, rcond=None):
    """
    Moore-Penrose pseudo-inverse. Singular values <= rcond * s_max count as zero.
    """
    A = as_matrix(A, "A")
    if rcond is None:
        rcond = default_rcond(A)
    if rcond < 0:
        raise ArgumentError(f"rcond must be >= 0, got {rcond}")

    if A.size == 0 or not np.any(A):
        return np.zeros((A.shape[1], A.shape[0]))

    result = svd(A)
    cutoff = rcond * result.S[0]
    keep = result.S > cutoff
    inv_s = np.zeros_like(result.S)
    inv_s[keep] = 1.0 / result.S[keep]
    return (result.Vt.T * inv_s) @ result.U.T


def best_rank_r(A, r):
    """
    Best rank-r approximation P_r(A) (Eckart-Young).

    Equal singular values are resolved by keeping the triplets that come
    first in the decomposition's order.
    """
    A = as_matrix(A, "A")
    if not 0 <= r <= min(A.shape):
        raise ArgumentError(f"rank {r} out of range for {A.shape} matrix")
    if r == 0:
        return np.zeros_like(A)

    result = svd(A)
    return (result.U[:, :r] * result.S[:r]) @ result.Vt[:r, :]


# ===============================================================
#  CANONICAL GEOMETRIES
# ===============================================================

def etf_gram(K):
    """Simplex ETF Gram: K/(K-1) (I - 11^T/K)."""
    if K < 2:
        raise ArgumentError(f"a simplex ETF needs K >= 2, got {K}")
    return K / (K - 1) * centering_matrix(K)


def gof_gram(a):
    """General orthogonal frame Gram: diag(a_k^2) / sum_j a_j^2."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0 or np.any(~(a > 0)):
        raise ArgumentError("GOF lengths must all be positive")
    return np.diag(a**2) / np.sum(a**2)


def centering_matrix(K):
    return np.eye(K) - np.ones((K, K)) / K


def random_orthonormal(rows, cols, rng):
    """
    Matrix with `cols` orthonormal columns from the QR of a Gaussian draw.
    Column signs are fixed by the diagonal of R so the result is a
    deterministic function of the generator state.
    """
    if cols > rows:
        raise ArgumentError(f"cannot fit {cols} orthonormal columns in R^{rows}")
    if cols == 0:
        return np.zeros((rows, 0))
    Q, R = scipy.linalg.qr(rng.standard_normal((rows, cols)), mode="economic")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def centered_basis(K, r):
    """
    First r orthonormal directions of the simplex ETF's column space
    (all orthogonal to the ones vector).
    """
    if r > K - 1:
        raise ArgumentError(f"only K-1={K - 1} directions are orthogonal to 1, asked for {r}")
    return svd(centering_matrix(K)).U[:, :r]


def sorted_spectrum(matrix, symmetric=True):
    """Eigenvalues (symmetric) or singular values, sorted descending."""
    if symmetric:
        values = scipy.linalg.eigvalsh((matrix + matrix.T) / 2)
    else:
        values = svd(matrix).S
    return np.sort(values)[::-1]
