"""Dense float64 kernels shared by the model, trainer, and compressors.

Matrices are plain ``numpy.ndarray`` objects: 2-D, row-major, float64.
Checkpoints may store weights as float32, but every routine here performs
its arithmetic in 64-bit. All functions are pure and safe to call
concurrently; for fixed inputs the results are reproducible across runs
and across worker-thread counts (the underlying BLAS never splits the
reduction dimension, so the accumulation order is fixed).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ContractViolation, DecompositionError, SingularMatrixError

__all__ = [
    "matmul",
    "softmax_with_temperature",
    "cholesky",
    "inverse_from_cholesky",
]


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` in float64.

    Raises:
        ContractViolation: if inner dimensions disagree.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}"
        )
    return a @ b


def softmax_with_temperature(logits: np.ndarray, t: float) -> np.ndarray:
    """Temperature-scaled softmax over a 1-D logits vector.

    Computes ``exp(u_i / t) / sum_j exp(u_j / t)`` with max-subtraction for
    stability. ``t == 0`` degenerates to greedy selection: the result is a
    one-hot vector on the argmax, ties broken toward the lowest index.

    Args:
        logits: 1-D array of finite scores.
        t: temperature, ``>= 0``.

    Returns:
        Probability vector of the same length, summing to 1 within 1e-12.
    """
    u = np.asarray(logits, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ContractViolation("logits must be a non-empty 1-D vector")
    if not np.isfinite(u).all():
        raise ContractViolation("logits must be finite")
    if t < 0:
        raise ContractViolation(f"temperature must be >= 0, got {t}")
    if t == 0.0:
        p = np.zeros_like(u)
        p[int(np.argmax(u))] = 1.0
        return p
    z = u / t
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def cholesky(h: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor L with ``L @ L.T == h``.

    Args:
        h: symmetric positive-definite matrix (symmetry checked to 1e-9
            relative to the largest entry).

    Raises:
        ContractViolation: if ``h`` is not square or not symmetric.
        DecompositionError: if ``h`` is not positive definite; the caller
            is expected to increase diagonal dampening and retry.
    """
    h = _as_matrix(h, "h")
    if h.shape[0] != h.shape[1]:
        raise ContractViolation(f"cholesky requires a square matrix, got {h.shape}")
    scale = max(1.0, float(np.abs(h).max())) if h.size else 1.0
    if float(np.abs(h - h.T).max()) > 1e-9 * scale:
        raise ContractViolation("cholesky input is not symmetric within 1e-9")
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"matrix is not positive definite: {exc}") from exc


def inverse_from_cholesky(l: np.ndarray) -> np.ndarray:
    """Inverse of ``L @ L.T`` from its lower-triangular factor ``l``.

    Solves the two triangular systems instead of forming L**-1 explicitly
    through a general inverse, so the result is accurate for the
    well-conditioned factors produced by :func:`cholesky`.

    Raises:
        ContractViolation: if ``l`` is not lower-triangular.
        SingularMatrixError: if any diagonal entry is zero (or negative).
    """
    l = _as_matrix(l, "l")
    n = l.shape[0]
    if l.shape[1] != n:
        raise ContractViolation(f"factor must be square, got {l.shape}")
    if n and float(np.abs(np.triu(l, k=1)).max()) != 0.0:
        raise ContractViolation("factor must be lower-triangular")
    if n and float(np.min(np.diag(l))) <= 0.0:
        raise SingularMatrixError("triangular factor has a non-positive diagonal entry")
    linv = scipy.linalg.solve_triangular(l, np.eye(n), lower=True, check_finite=False)
    return linv.T @ linv
