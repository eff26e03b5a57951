"""Dense numeric kernels shared by every module.

Matrices are plain float64 numpy arrays (row-major); 32-bit storage is
allowed for bulk index keys but all reductions accumulate in 64-bit.
Every public operation here is total on finite input and never lets a
NaN/Inf escape.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import NonFinite, ZeroVector

ZERO_NORM_EPS = 1e-12


def ensure_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise NonFinite if ``arr`` contains NaN or Inf."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains non-finite values")
    return arr


def softmax(m: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(m: np.ndarray, axis: str = "rows") -> np.ndarray:
    """Softmax over the named axis of a 2-D matrix.

    ``axis="rows"``: each row is normalized to sum to 1.
    ``axis="cols"``: each column is normalized to sum to 1.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if axis == "rows":
        return softmax(m, axis=1)
    if axis == "cols":
        return softmax(m, axis=0)
    raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM_EPS:
        raise ZeroVector(f"cannot normalize vector with norm {norm}")
    return v / norm


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error between analytic gradients and central differences.

    ``f`` is a scalar loss evaluated on the current contents of ``params``;
    the arrays are perturbed in place and restored. For each parameter the
    reported value is

        max over elements of |a - fd| / max(|a|, |fd|, 1e-8)

    where ``fd = (f(p + eps) - f(p - eps)) / (2 eps)``.
    """
    report: dict[str, float] = {}
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"analytic gradient for {name} has shape {a.shape}, "
                             f"parameter has {p.shape}")
        flat = p.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params))
            flat[i] = orig - eps
            lo = float(f(params))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFinite(f"loss not finite while perturbing {name}[{i}]")
            fd[i] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(a.reshape(-1)), np.abs(fd)), 1e-8)
        rel = np.abs(a.reshape(-1) - fd) / denom
        report[name] = float(rel.max()) if rel.size else 0.0
    return report
