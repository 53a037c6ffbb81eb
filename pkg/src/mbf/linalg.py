"""Dense symmetric linear algebra used by the preconditioners.

Every function accepts either a single ``(d, d)`` matrix or a stack of
matrices shaped ``(..., d, d)`` where noted; stacks are how the optimizers
process all mini-blocks of a layer at once.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidInputError, InversionError, SymmetryError

SYMMETRY_TOL = 1e-12
NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-10


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues[..., None, :]) @ np.swapaxes(v, -1, -2)


def as_symmetric(G, name="matrix") -> np.ndarray:
    """Validate ``G`` as a finite, square, symmetric float64 array (or stack)."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim < 2 or G.shape[-1] != G.shape[-2]:
        raise InvalidInputError(f"{name} must be square, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise InvalidInputError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(G)))) if G.size else 1.0
    asym = float(np.max(np.abs(G - np.swapaxes(G, -1, -2)))) if G.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise SymmetryError(f"{name} is not symmetric (max |G - G^T| = {asym:.3e})")
    return G


def _cholesky(A):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None


def damped_inverse(G, lam, label=None) -> np.ndarray:
    """Return ``(G + lam*I)^{-1}`` for a symmetric PSD ``G`` (or a stack of them).

    Uses a Cholesky factorization. If that fails, a jitter of
    ``1e-12 * trace(G) / d`` is added and the factorization retried once.
    """
    if not lam > 0:
        raise InvalidInputError(f"damping must be positive, got {lam}")
    G = as_symmetric(G)
    d = G.shape[-1]
    eye = np.eye(d)
    A = G + lam * eye
    L = _cholesky(A)
    if L is None:
        trace = np.trace(G, axis1=-2, axis2=-1)
        jitter = np.abs(1e-12 * trace / d)[..., None, None]
        L = _cholesky(A + jitter * eye)
        if L is None:
            raise InversionError("damped matrix is not positive definite", label)
    L_inv = np.linalg.solve(L, np.broadcast_to(eye, L.shape))
    H = np.swapaxes(L_inv, -1, -2) @ L_inv
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def sym_eig(G) -> Spectrum:
    G = as_symmetric(G)
    w, v = np.linalg.eigh(G)
    return Spectrum(w, v)


def min_eigenvalue(G) -> float:
    lowest = np.linalg.eigvalsh(as_symmetric(G))[..., 0]
    return float(lowest) if lowest.ndim == 0 else lowest


def _matrix_power(M, p):
    result = None
    base = M
    while p:
        if p & 1:
            result = base if result is None else result @ base
        p >>= 1
        if p:
            base = base @ base
    return result


def inverse_pth_root(G, p, eps, max_iter=NEWTON_MAX_ITER, tol=NEWTON_TOL) -> np.ndarray:
    """Compute ``(G + eps*I)^{-1/p}`` with the coupled Newton iteration.

    The iteration keeps two coupled sequences, ``X_k -> A^{-1/p}`` and
    ``M_k = X_k^p A -> I``, starting from ``X_0 = z^{1/p} I`` and
    ``M_0 = z A`` with ``z = (1 + p) / (2 ||A||_F)``, so that every eigenvalue
    of ``M_0`` lies in ``(0, (1 + p) / 2]``.

    Args:
        G: symmetric PSD matrix.
        p: root order, a positive integer.
        eps: positive damping added to the diagonal.
        max_iter: iteration budget.
        tol: convergence threshold on ``max |M_k - I|``.

    Raises:
        ConvergenceError: the residual did not reach ``tol`` within
            ``max_iter`` iterations, or stalled above it.
    """
    if int(p) != p or p < 1:
        raise InvalidInputError(f"root order must be a positive integer, got {p}")
    if not eps > 0:
        raise InvalidInputError(f"damping must be positive, got {eps}")
    p = int(p)
    G = as_symmetric(G)
    d = G.shape[-1]
    eye = np.eye(d)
    A = G + eps * eye
    z = (1.0 + p) / (2.0 * np.linalg.norm(A))
    M = z * A
    X = z ** (1.0 / p) * eye
    residual = float(np.max(np.abs(M - eye)))
    alpha = -1.0 / p
    for _ in range(max_iter):
        if residual <= tol:
            break
        M_i = (1.0 - alpha) * eye + alpha * M
        M_next = _matrix_power(M_i, p) @ M
        X_next = X @ M_i
        next_residual = float(np.max(np.abs(M_next - eye)))
        if not np.isfinite(next_residual):
            raise ConvergenceError("coupled Newton iteration diverged", residual)
        if next_residual >= residual and residual < 1e-6:
            # rounding floor: accept the previous iterate if it is already tight
            if residual <= 1e3 * tol:
                break
            raise ConvergenceError("coupled Newton iteration stalled", residual)
        X, M, residual = X_next, M_next, next_residual
    else:
        if residual > tol:
            raise ConvergenceError(
                f"coupled Newton iteration did not converge in {max_iter} iterations", residual
            )
    return 0.5 * (X + X.T)
