"""Small dense matrix kernels: matrix exponential, ``f(A) = sum A^n/(n+1)!``
and the Perron eigenpair of a matrix with positive off-diagonal entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Degree-13 diagonal Pade coefficients and the 1-norm bound below which the
# approximant is accurate to double precision (Higham 2005).
PADE13_COEFFS = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
PADE13_THETA = 5.371920351148152

POWER_TOL = 1e-12
POWER_MAX_ITER = 200
PHI_COND_LIMIT = 1e8


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _pade13(A: np.ndarray) -> np.ndarray:
    """Pade approximant of exp on a stack of matrices with small norm."""
    b = PADE13_COEFFS
    m = A.shape[-1]
    eye = np.broadcast_to(np.eye(m), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    odd = A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye
    odd = A @ odd
    even = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye
    return np.linalg.solve(even - odd, even + odd)


def matrix_exp(A, t=1.0) -> np.ndarray:
    """``exp(A t)`` by scaling and squaring around a degree-13 Pade approximant.

    ``t`` may be a scalar or a 1-d array of times; for an array the result is
    stacked along a leading axis.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    t_arr = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(t_arr))):
        raise ValueError("matrix_exp requires finite input")
    scalar = t_arr.ndim == 0
    ts = np.atleast_1d(t_arr)
    m = A.shape[0]
    X = ts[:, None, None] * A
    out = np.empty_like(X)

    zero = ts == 0
    out[zero] = np.eye(m)
    live = ~zero
    if np.any(live):
        Xl = X[live]
        norms = np.abs(Xl).sum(axis=-2).max(axis=-1)
        s = np.maximum(0, np.ceil(np.log2(np.maximum(norms, 1e-300) / PADE13_THETA))).astype(int)
        E = _pade13(Xl / (2.0 ** s)[:, None, None])
        for k in range(int(s.max(initial=0))):
            sel = s > k
            E[sel] = E[sel] @ E[sel]
        out[live] = E
    return out[0] if scalar else out


def phi(A) -> np.ndarray:
    """``f(A) = sum_{n>=0} A^n / (n+1)!``, the matrix with ``f(A) A = exp(A) - I``.

    Uses ``(exp(A) - I) A^{-1}`` when A is well conditioned and not small;
    otherwise reads f(A) off the upper-right block of ``exp([[A, I], [0, 0]])``,
    which sums the same series without cancellation.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    if not np.all(np.isfinite(A)):
        raise ValueError("phi requires finite input")
    if not np.any(A):
        return np.eye(m)
    if np.abs(A).sum(axis=0).max() >= 1.0 and np.linalg.cond(A) < PHI_COND_LIMIT:
        E = matrix_exp(A) - np.eye(m)
        return np.linalg.solve(A.T, E.T).T
    big = np.zeros((2 * m, 2 * m))
    big[:m, :m] = A
    big[:m, m:] = np.eye(m)
    return matrix_exp(big)[:m, m:]


@dataclass(frozen=True, eq=False)
class EigenPair:
    omega: float
    u: np.ndarray
    iterations: int = 0


def leading_left_eigenpair(A, tol=POWER_TOL, max_iter=POWER_MAX_ITER) -> EigenPair:
    """Leading eigenvalue and positive left eigenvector (summing to one) of A.

    Power iteration on the entrywise-positive shift ``B = A + kI`` with
    ``k = max |A_ii| + 1``; Perron-Frobenius makes the dominant eigenvector of
    B the leading eigenvector of A.  The iteration matrix is squared after
    every step, so step n applies ``B^(2^n)`` and badly scaled matrices (a
    small spectral gap relative to ``k``) still converge in a few dozen steps.
    ``iterations`` counts those steps.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    off = ~np.eye(m, dtype=bool)
    if np.any(A[off] <= 0):
        raise ValueError("leading_left_eigenpair needs strictly positive off-diagonal entries")
    k = np.abs(np.diag(A)).max() + 1.0
    C = A + k * np.eye(m)
    C /= C.max()
    x = np.full(m, 1.0 / m)
    for it in range(1, max_iter + 1):
        y = x @ C
        y /= y.sum()
        delta = np.abs(y - x).max()
        x = y
        if delta < tol:
            break
        C = C @ C
        C /= C.max()
    else:
        omega = float(x @ A @ x / (x @ x))
        res = float(np.abs(x @ A - omega * x).max())
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} iterations (residual {res:.3g})",
            residual=res, iterations=max_iter,
        )
    omega = float(x @ A @ x / (x @ x))
    res = float(np.abs(x @ A - omega * x).max())
    if res > 1e-9 * max(np.abs(A).sum(axis=1).max(), 1e-300):
        raise ConvergenceError(f"eigenpair residual too large: {res:.3g}", residual=res, iterations=it)
    x.setflags(write=False)
    return EigenPair(omega=omega, u=x, iterations=it)


def exp_action_left(A, v, times) -> np.ndarray:
    """Rows ``v^T exp(A t_k)`` for every time in ``times``; shape (n, m).

    Goes through an eigendecomposition of A when its eigenvector matrix is
    well conditioned, otherwise falls back to one exponential per time.
    """
    return _exp_action(np.asarray(A, dtype=float).T, v, times)


def exp_action_right(A, v, times) -> np.ndarray:
    """Columns ``exp(A t_k) v`` for every time in ``times``, stacked as rows."""
    return _exp_action(np.asarray(A, dtype=float), v, times)


def _exp_action(A, v, times):
    times = np.atleast_1d(np.asarray(times, dtype=float))
    v = np.asarray(v, dtype=float)
    mu, V = np.linalg.eig(A)
    if np.linalg.cond(V) < 1e6:
        if not np.any(mu.imag):
            mu, V = mu.real, V.real
        coef = np.linalg.solve(V, v.astype(V.dtype))
        out = ((np.exp(times[:, None] * mu) * coef) @ V.T).real
        out[times == 0] = v
        return out
    return matrix_exp(A, times) @ v
