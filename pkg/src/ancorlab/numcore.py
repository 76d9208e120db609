"""Dense float64 array math with explicit analytic gradients.

Conventions used package-wide:
  * matrices are 2-D C-contiguous float64 arrays (weights are (out, in),
    biases (1, out));
  * single feature/embedding vectors are 1-D float64 arrays; batched
    counterparts stack them as rows of an (n, dim) matrix;
  * every public operation validates that its result is finite.

Gradients are hand-written backward functions (no tape); each one is covered
by ``finite_diff_check`` in the test suite.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateVectorError, DimensionError, NumericsError

EPS_NORM = 1e-12


def as_array(x, ndim: int | None = None) -> np.ndarray:
    """Coerce to float64 ndarray, optionally enforcing dimensionality."""
    a = np.asarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise DimensionError(f"expected {ndim}-D array, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{what} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with explicit shape validation."""
    a = as_array(a, 2)
    b = as_array(b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """x / ||x|| for a 1-D vector. Raises on near-zero norm."""
    x = as_array(x, 1)
    n = float(np.linalg.norm(x))
    if n <= EPS_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    return x / n


def l2_normalize_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Backward of l2_normalize: pull gradient g (w.r.t. x/||x||) back to x.

    d(x/||x||)/dx = (I - u u^T) / ||x||  with u = x/||x||.
    """
    x = as_array(x, 1)
    g = as_array(g, 1)
    n = float(np.linalg.norm(x))
    if n <= EPS_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    u = x / n
    return (g - u * float(u @ g)) / n


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization of an (n, d) matrix. Returns (unit rows, norms)."""
    x = as_array(x, 2)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= EPS_NORM):
        i = int(np.argmin(norms))
        raise DegenerateVectorError(f"row {i} has norm {norms[i]:.3e}")
    return x / norms[:, None], norms


def l2_normalize_rows_grad(unit: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row-wise backward of l2_normalize_rows given its forward outputs."""
    dots = np.sum(unit * g, axis=1, keepdims=True)
    return (g - unit * dots) / norms[:, None]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax of a 1-D logits vector (max subtraction)."""
    logits = as_array(logits, 1)
    m = np.max(logits)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[label] and its gradient softmax - one_hot(label)."""
    logits = as_array(logits, 1)
    check_finite(logits, "logits")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row CE losses and gradients for (n, R) logits and (n,) int labels."""
    logits = as_array(logits, 2)
    check_finite(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(logits.shape[0])
    losses = -logp[rows, labels]
    grads = np.exp(logp)
    grads[rows, labels] -= 1.0
    return losses, grads


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic_grad and central differences of f.

    The relative error per entry uses denominator max(|fd|, |analytic|, 1e-8).
    Raises NumericsError if f returns a non-finite value anywhere probed.
    """
    x = np.array(x, dtype=np.float64)  # private copy; entries are perturbed in place
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic_grad.shape} != input shape {x.shape}")
    if h <= 0:
        raise ValueError("h must be positive")
    worst = 0.0
    flat_x = x.ravel()
    flat_g = analytic_grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"function returned non-finite value at entry {i}")
        fd = (fp - fm) / (2.0 * h)
        denom = max(abs(fd), abs(flat_g[i]), 1e-8)
        worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst
