"""Preconditioned conjugate gradients on arrays of arbitrary shape."""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class CGInfo:
    iterations: int
    residual: float        # final relative residual ||r|| / ||rhs||
    converged: bool


def _dot(a, b):
    return float(np.vdot(a, b).real)


def pcg(apply_A, rhs, x0=None, precond=None, tol=1e-8, maxiter=200, callback=None):
    """Solve A x = rhs for Hermitian positive definite A given as a callable.

    Iterates are monotone in the quadratic 0.5 x^T A x - rhs^T x, so a
    warm-started, truncated solve never increases it.  Emits a log warning
    if ``maxiter`` is reached before ``tol``.
    """
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=rhs.dtype, copy=True)
    r = rhs - apply_A(x)
    bnorm = np.sqrt(_dot(rhs, rhs))
    if bnorm == 0:
        return np.zeros_like(rhs), CGInfo(0, 0.0, True)
    z = r if precond is None else precond(r)
    d = z.copy()
    rz = _dot(r, z)
    res = np.sqrt(_dot(r, r)) / bnorm
    it = 0
    while res > tol and it < maxiter:
        ad = apply_A(d)
        dad = _dot(d, ad)
        if dad <= 0:
            break
        alpha = rz / dad
        x += alpha * d
        r -= alpha * ad
        it += 1
        if callback is not None:
            callback(x)
        res = np.sqrt(_dot(r, r)) / bnorm
        if res <= tol:
            break
        z = r if precond is None else precond(r)
        rz_new = _dot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    converged = res <= tol
    if not converged:
        log.warning("CG stopped at iteration limit %d with relative residual %.3e", it, res)
    return x, CGInfo(it, float(res), converged)
