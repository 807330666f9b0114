"""Dense float64 linear algebra helpers and a finite-difference gradient oracle.

Matrices are 2-D and vectors 1-D ``float64`` ndarrays with finite entries;
``as_matrix`` / ``as_vector`` validate and coerce.  All tolerances in the
package assume 64-bit arithmetic.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateNorm, DimMismatch, NonFiniteEvaluation

EPS_NORM = 1e-12


def as_vector(data) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatch(f"expected 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


def as_matrix(data) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimMismatch(f"expected 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm <= EPS_NORM:
        raise DegenerateNorm(f"norm {norm} <= {EPS_NORM}")
    return v / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimMismatch(f"dims {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateNorm(f"norms ({na}, {nb}) with threshold {EPS_NORM}")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimMismatch(f"inner dims {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``p``.

    The independent oracle for every analytic gradient in the package; it must
    never share code with the paths it checks.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    p = as_vector(p)
    grad = np.empty_like(p)
    for i in range(p.shape[0]):
        step = np.zeros_like(p)
        step[i] = h
        hi = f(p + step)
        lo = f(p - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteEvaluation(f"non-finite evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad
