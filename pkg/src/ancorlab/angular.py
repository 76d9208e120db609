"""Class-anchored angular normalization.

Maps an embedding x to the unit direction of x/||x|| - w_y/||w_y||, where w_y
is the classifier weight row of the sample's coarse class. Contrastive forces
applied to the result act on the angle around the class weight instead of the
distance to it, which keeps them from fighting the cross-entropy pull toward
w_y. Both q and the (constant) keys are mapped with the same (W, y); gradient
flows into x and, optionally, into w_y.

The map is undefined when x points in the same direction as w_y; that case is
surfaced as ParallelDegenerateError rather than clamped, since hitting it in
training means the embedding collapsed onto its class weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, DimensionError, ParallelDegenerateError
from .numcore import EPS_NORM, as_array

EPS_PARALLEL = 1e-8


@dataclass
class AngularCache:
    """Forward intermediates needed by the backward pass (row-stacked)."""

    x_unit: np.ndarray      # (n, e) x / ||x||
    x_norm: np.ndarray      # (n,)
    w_unit: np.ndarray      # (e,)  w_y / ||w_y||
    w_norm: float
    diff_unit: np.ndarray   # (n, e) normalized difference = forward output
    diff_norm: np.ndarray   # (n,)


def _class_weight_unit(W: np.ndarray, y: int) -> tuple[np.ndarray, float]:
    W = as_array(W, 2)
    if not 0 <= y < W.shape[0]:
        raise IndexError(f"class index {y} out of range for {W.shape[0]} rows")
    w = W[y]
    wn = float(np.linalg.norm(w))
    if wn <= EPS_NORM:
        raise DegenerateVectorError(f"class weight row {y} has norm {wn:.3e}")
    return w / wn, wn


def angular_rows(X: np.ndarray, W: np.ndarray, y: int) -> tuple[np.ndarray, AngularCache]:
    """Angular-normalize every row of X (n, e) against class y of W (R, e)."""
    X = as_array(X, 2)
    w_unit, w_norm = _class_weight_unit(W, y)
    if X.shape[1] != W.shape[1]:
        raise DimensionError(
            f"embedding dim {X.shape[1]} != classifier weight dim {W.shape[1]}"
        )
    x_norm = np.linalg.norm(X, axis=1)
    if np.any(x_norm <= EPS_NORM):
        i = int(np.argmin(x_norm))
        raise DegenerateVectorError(f"element {i} has norm {x_norm[i]:.3e}")
    x_unit = X / x_norm[:, None]
    diff = x_unit - w_unit
    diff_norm = np.linalg.norm(diff, axis=1)
    if np.any(diff_norm <= EPS_PARALLEL):
        i = int(np.argmin(diff_norm))
        raise ParallelDegenerateError(
            f"element {i} is positively parallel to class weight {y} "
            f"(difference norm {diff_norm[i]:.3e})"
        )
    diff_unit = diff / diff_norm[:, None]
    return diff_unit, AngularCache(x_unit, x_norm, w_unit, w_norm, diff_unit, diff_norm)


def angular_rows_grad(cache: AngularCache, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward of angular_rows.

    g is the upstream gradient w.r.t. the normalized output rows; returns
    (dX, dW_y) where dW_y sums the contributions of all rows.
    """
    g = as_array(g, 2)
    # through the final normalization of the difference
    dots = np.sum(cache.diff_unit * g, axis=1, keepdims=True)
    d_diff = (g - cache.diff_unit * dots) / cache.diff_norm[:, None]
    # diff = x_unit - w_unit
    d_xunit = d_diff
    d_wunit = -d_diff.sum(axis=0)
    # through x_unit = x / ||x||
    xdots = np.sum(cache.x_unit * d_xunit, axis=1, keepdims=True)
    dX = (d_xunit - cache.x_unit * xdots) / cache.x_norm[:, None]
    # through w_unit = w / ||w||
    dWy = (d_wunit - cache.w_unit * float(cache.w_unit @ d_wunit)) / cache.w_norm
    return dX, dWy


def angular_normalize(x: np.ndarray, W: np.ndarray, y: int) -> np.ndarray:
    """Angular-normalize a single e-dim vector against class y."""
    out, _ = angular_rows(as_array(x, 1)[None, :], W, y)
    return out[0]


def angular_normalize_batch(
    q: np.ndarray,
    k_pos: np.ndarray,
    k_negs: np.ndarray,
    W: np.ndarray,
    y: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the same (W, y) normalization to query, positive key and negatives.

    k_negs is an (m, e) matrix (m may be 0). A degenerate member raises with a
    message identifying which element failed.
    """
    q = as_array(q, 1)
    k_pos = as_array(k_pos, 1)
    k_negs = np.asarray(k_negs, dtype=np.float64).reshape(-1, q.shape[0])
    try:
        aq = angular_normalize(q, W, y)
    except (DegenerateVectorError, ParallelDegenerateError) as exc:
        raise type(exc)(f"query: {exc}") from None
    try:
        ak = angular_normalize(k_pos, W, y)
    except (DegenerateVectorError, ParallelDegenerateError) as exc:
        raise type(exc)(f"positive key: {exc}") from None
    if k_negs.shape[0] == 0:
        return aq, ak, k_negs.copy()
    try:
        anegs, _ = angular_rows(k_negs, W, y)
    except (DegenerateVectorError, ParallelDegenerateError) as exc:
        raise type(exc)(f"negative key {exc}") from None
    return aq, ak, anegs
