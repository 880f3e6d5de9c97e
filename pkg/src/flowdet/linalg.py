"""Dense linear algebra kernels: LU determinants, inverses, Jacobi eigensolver
and power-iteration spectral norms.

Matrices are plain 2-D ``float64`` numpy arrays; :func:`as_matrix` is the
validating constructor used at every entry point.
"""

import math
import warnings
from typing import NamedTuple

import numpy as np

from .errors import NoConvergenceWarning, SingularMatrixError

PIVOT_FLOOR = 1e-300
SYMMETRY_TOL = 1e-12
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class EigenPair(NamedTuple):
    """Eigenvalues in descending order and the matching unit eigenvectors
    (as columns)."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a, square=False):
    """Return ``a`` as a finite 2-D float64 array, raising ``ValueError`` otherwise."""
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    if square and m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def lu_factor(a):
    """Partial-pivot LU factorization.

    Returns ``(lu, perm, sign)`` where ``lu`` packs the unit-lower factor below
    the diagonal and the upper factor on and above it, ``perm`` is the row
    permutation (``a[perm] = L @ U``) and ``sign`` the permutation parity.
    """
    lu = as_matrix(a, square=True)
    n = lu.shape[0]
    perm = np.arange(n)
    sign = 1
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < PIVOT_FLOOR:
            raise SingularMatrixError(f"pivot {k} has magnitude {abs(lu[p, k]):.3g}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm, sign


def plu_logabsdet(a):
    """``(log|det a|, sign(det a))`` via partial-pivot LU."""
    lu, _, sign = lu_factor(a)
    diag = np.diag(lu)
    sign *= int(np.prod(np.sign(diag)))
    return float(np.sum(np.log(np.abs(diag)))), sign


def lu_solve(lu, perm, b):
    """Solve ``a x = b`` given the output of :func:`lu_factor`; ``b`` may be a matrix."""
    x = np.array(b, dtype=np.float64)[perm]
    n = lu.shape[0]
    for i in range(1, n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lu[i, i + 1:] @ x[i + 1:]) / lu[i, i]
    return x


def invert(a):
    lu, perm, _ = lu_factor(a)
    return lu_solve(lu, perm, np.eye(lu.shape[0]))


def _offdiag_norm(a):
    upper = np.triu(a, 1)
    return math.sqrt(2.0 * float(np.sum(upper * upper)))


def sym_eig(s, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps continue until the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||s||_F)``.
    """
    a = as_matrix(s, square=True)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        if _offdiag_norm(a) < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < PIVOT_FLOOR:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = t * c
                rp, rq = a[p].copy(), a[q].copy()
                a[p], a[q] = c * rp - sn * rq, sn * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * cp - sn * cq, sn * cp + c * cq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - sn * vq, sn * vp + c * vq
    else:
        if _offdiag_norm(a) >= threshold:
            warnings.warn("Jacobi sweeps did not converge", NoConvergenceWarning, stacklevel=2)
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenPair(values[order], v[:, order])


def _power_iterate(a, v, tol, max_iter):
    lam_prev = -1.0
    lam = 0.0
    for it in range(max_iter):
        u = a @ v
        lam = float(u @ u)
        w = a.T @ u
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return lam, v, it, False
        v = w / nrm
        if abs(lam - lam_prev) <= tol * lam:
            return lam, v, it, True
        lam_prev = lam
    return lam, v, max_iter, False


def spectral_norm(a, tol=1e-8, max_iter=1000):
    """Largest singular value of ``a`` by power iteration on ``a.T @ a``.

    The start vector is the normalized all-ones vector.  A converged estimate
    is re-checked once from a deterministic vector orthogonal to the converged
    one, which recovers the top singular value when the start vector happened
    to be orthogonal to it.  Hitting ``max_iter`` emits
    :class:`NoConvergenceWarning` and returns the best estimate.
    """
    a = as_matrix(a)
    n = a.shape[1]
    if not np.any(a):
        raise ValueError("spectral_norm requires a nonzero matrix")
    bump = np.cos(np.arange(1, n + 1))
    v = np.ones(n) / math.sqrt(n)
    lam, v, _, ok = _power_iterate(a, v, tol, max_iter)
    if not ok and lam == 0.0:
        v = np.ones(n) + 1e-6 * bump
        lam, v, _, ok = _power_iterate(a, v / np.linalg.norm(v), tol, max_iter)
    if n > 1:
        w = bump - (bump @ v) * v
        if np.linalg.norm(w) > 1e-8:
            lam2, _, _, ok2 = _power_iterate(a, w / np.linalg.norm(w), tol, max_iter)
            if lam2 > lam * (1.0 + tol):
                lam, ok = lam2, ok2
    if not ok:
        warnings.warn(f"power iteration did not reach tol={tol} in {max_iter} steps",
                      NoConvergenceWarning, stacklevel=2)
    return math.sqrt(lam)
