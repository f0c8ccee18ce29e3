"""Operator-norm estimation helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NormEstimate:
    value: float
    iterations: int
    converged: bool


def power_norm(matvec, rmatvec, n: int, *, tol: float = 1e-10, maxiter: int = 5000, seed: int = 0) -> NormEstimate:
    """Largest singular value of a linear map by power iteration on ``A^* A``.

    ``matvec`` and ``rmatvec`` apply ``A`` and ``A^*`` to vectors of length ``n``
    (the domain) and of the codomain respectively.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    prev = 0.0
    for it in range(1, maxiter + 1):
        y = matvec(x)
        sigma = float(np.linalg.norm(y))
        if sigma == 0.0:
            return NormEstimate(0.0, it, True)
        z = rmatvec(y)
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return NormEstimate(sigma, it, True)
        x = z / nz
        if abs(sigma - prev) <= tol * sigma:
            return NormEstimate(sigma, it, True)
        prev = sigma
    return NormEstimate(prev, maxiter, False)


def matrix_power_norm(a, **kw) -> NormEstimate:
    """Power-iteration norm of a dense array or scipy sparse matrix."""
    at = a.conj().T
    return power_norm(lambda v: a @ v, lambda v: at @ v, a.shape[1], **kw)


def spectral_norm(a: np.ndarray) -> float:
    """Exact largest singular value (dense SVD)."""
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))
