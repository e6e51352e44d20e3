"""Explicit dense output layer: the O(D d) baseline and equivalence oracle.

Stores the full D x d weight matrix W and performs the textbook forward,
loss, gradient and rank-one update.  Every factored result is tested against
this layer run in lockstep on the same input stream.  Deliberately plain:
it has to be honest, not fast.
"""

from __future__ import annotations

import numpy as np

from .factored import StepResult
from .sparse import SparseVec, sparse_sq_norm


class NaiveOutputLayer:
    """Dense W, updated in place.  Single writer per instance."""

    def __init__(self, W: np.ndarray):
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("W must be 2-d")
        if not np.all(np.isfinite(W)):
            raise ValueError("W must be finite")
        self.W = W

    @classmethod
    def zeros(cls, D: int, d: int) -> "NaiveOutputLayer":
        return cls(np.zeros((D, d)))

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]


def naive_forward(layer: NaiveOutputLayer, h: np.ndarray) -> np.ndarray:
    """o = W h, densely."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d,):
        raise ValueError(f"h must have shape ({layer.d},), got {h.shape}")
    return layer.W @ h


def naive_step(layer: NaiveOutputLayer, h: np.ndarray, y: SparseVec, eta: float) -> StepResult:
    """Loss, grad_h and the dense update W -= 2 eta (W h - y) h^T.

    Loss and gradient use the pre-update W, matching the factored layer's
    step ordering.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d,):
        raise ValueError(f"h must have shape ({layer.d},), got {h.shape}")
    if y.dim != layer.D:
        raise ValueError(f"y.dim {y.dim} != D {layer.D}")
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    r = layer.W @ h  # becomes the residual o - y below
    r[y.indices] -= y.values
    loss = float(r @ r)
    grad_h = 2.0 * (layer.W.T @ r)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}: training diverged")
    layer.W -= (2.0 * eta) * np.outer(r, h)
    return StepResult(loss=loss, grad_h=grad_h)


def naive_step_minibatch(
    layer: NaiveOutputLayer, H: np.ndarray, Y: list[SparseVec], eta: float
) -> tuple[float, np.ndarray]:
    """Batched dense update W -= 2 eta (W H - Y) H^T for m column examples.

    Returns (total loss, grad_H), both from the pre-update W.  The loss is a
    sum over columns, not a mean; there is no 1/m factor anywhere.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != layer.d:
        raise ValueError(f"H must have shape ({layer.d}, m), got {H.shape}")
    m = H.shape[1]
    if len(Y) != m:
        raise ValueError(f"expected {m} targets, got {len(Y)}")
    R = layer.W @ H
    for i, y in enumerate(Y):
        if y.dim != layer.D:
            raise ValueError(f"Y[{i}].dim {y.dim} != D {layer.D}")
        R[y.indices, i] -= y.values
    loss = float(np.sum(R * R))
    grad_H = 2.0 * (layer.W.T @ R)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}: training diverged")
    layer.W -= (2.0 * eta) * (R @ H.T)
    return loss, grad_H
