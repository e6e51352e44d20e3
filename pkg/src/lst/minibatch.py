"""Minibatch updates for the factored layer, with two inverse strategies.

For m examples held as columns of H (hidden vectors) and a list of m sparse
targets Y, the batched step mirrors the online one:

    H_hat  = Q H
    Y_hat  = U^T (V^T Y)
    Z_hat  = H_hat - Y_hat
    grad_H = 2 Z_hat
    M      = H^T H_hat - (Y_hat^T H + H^T Y_hat) + Y^T Y
    loss   = tr(M)
    U      = U - 2 eta (U H) H^T
    Uinv_t = woodbury rank-m update, or skipped (solve from scratch)
    V      = V + 2 eta Y (Uinv_t_new H)^T
    Q      = Q - 2 eta (H Z_hat^T + Z_hat H^T) + 4 eta^2 (H M) H^T

The transposed inverse can be maintained by the Woodbury identity (inverting
an m x m system) or bypassed entirely by solving U_new^T X = H fresh each
batch; past a crossover in m the solve is cheaper.  The solve path leaves the
stored Uinv_t stale; it is refreshed lazily before its next use.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import stabilization as _stab
from .factored import FactoredOutputLayer, _check_h, _ensure_uinv_fresh
from .sparse import SparseVec, gather_rows_weighted, scatter_rank_one, sparse_dot

# Woodbury's m x m system above this condition estimate is treated as singular
BATCH_SINGULAR_COND = 1e12


class SingularBatchUpdate(ArithmeticError):
    """The m x m Woodbury system (H^T H - I/(2 eta)) is numerically singular."""


@dataclasses.dataclass(frozen=True)
class InverseStrategy:
    """How to keep U^{-T} H computable across batches.

    crossover is an advisory batch-size hint m*: auto selection uses
    woodbury for m <= m* and the per-batch solve above it.
    """

    mode: str  # "woodbury" | "solve_each_batch"
    crossover: int | None = None

    def __post_init__(self):
        if self.mode not in ("woodbury", "solve_each_batch"):
            raise ValueError(f"mode must be 'woodbury' or 'solve_each_batch', got {self.mode!r}")


WOODBURY = InverseStrategy("woodbury")
SOLVE_EACH_BATCH = InverseStrategy("solve_each_batch")


def default_strategy(m: int, d: int, crossover: int | None = None) -> InverseStrategy:
    """woodbury below the crossover (default d/4, from the m^3 solve term), else solve."""
    m_star = crossover if crossover is not None else max(1, d // 4)
    return WOODBURY if m <= m_star else SOLVE_EACH_BATCH


@dataclasses.dataclass(frozen=True)
class MinibatchResult:
    loss_total: float
    grad_H: np.ndarray
    loss_matrix_trace_checked: bool


def _check_H(layer: FactoredOutputLayer, H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != layer.d:
        raise ValueError(f"H must have shape ({layer.d}, m), got {H.shape}")
    return H


def _gather_columns(V: np.ndarray, Y: list[SparseVec], D: int) -> np.ndarray:
    cols = np.empty((V.shape[1], len(Y)))
    for i, y in enumerate(Y):
        if y.dim != D:
            raise ValueError(f"Y[{i}].dim {y.dim} != D {D}")
        cols[:, i] = gather_rows_weighted(V, y)
    return cols


def _sparse_gram(Y: list[SparseVec]) -> np.ndarray:
    """Y^T Y from pairwise merged-index dot products; O(m^2 K log K)."""
    m = len(Y)
    G = np.empty((m, m))
    for i in range(m):
        G[i, i] = sparse_dot(Y[i], Y[i])
        for j in range(i + 1, m):
            G[i, j] = G[j, i] = sparse_dot(Y[i], Y[j])
    return G


def woodbury_update_inverse(Uinv_t: np.ndarray, H: np.ndarray, eta: float) -> np.ndarray:
    """Rank-m update of U^{-T} matching U_new = U - 2 eta (U H) H^T.

    U_new^{-T} = U^{-T} - (U^{-T} H) ((H^T H - I/(2 eta))^{-1} H^T).
    With m = 1 this reduces exactly to the online rank-one formula.
    """
    if eta == 0.0:
        return Uinv_t.copy()
    m = H.shape[1]
    A = H.T @ H - (1.0 / (2.0 * eta)) * np.eye(m)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > BATCH_SINGULAR_COND:
        raise SingularBatchUpdate(f"m x m system condition estimate {cond:.3e}")
    S = np.linalg.solve(A, H.T)
    return Uinv_t - (Uinv_t @ H) @ S


def solve_inverse_transpose_apply(U_new: np.ndarray, H: np.ndarray) -> np.ndarray:
    """X = U_new^{-T} H by solving U_new^T X = H.

    One LU factorization with partial pivoting, reused across the m
    right-hand sides.  Raises numpy.linalg.LinAlgError on singular U_new.
    """
    return np.linalg.solve(U_new.T, H)


def minibatch_step(
    layer: FactoredOutputLayer,
    H: np.ndarray,
    Y: list[SparseVec],
    eta: float,
    strategy: InverseStrategy | None = None,
    stab: _stab.StabilizationConfig | None = None,
    verify_loss_trace: bool = False,
) -> MinibatchResult:
    """One batched step; loss and grad_H refer to the pre-update weights.

    strategy=None picks woodbury vs solve_each_batch from the batch size.
    verify_loss_trace additionally computes the non-symmetric variant of the
    m x m loss matrix and cross-checks the trace (a debug mode; the result
    flag records whether the check ran).
    """
    H = _check_H(layer, H)
    m = H.shape[1]
    if m < 1 or len(Y) != m:
        raise ValueError(f"expected {H.shape[1]} targets, got {len(Y)}")
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    if strategy is None:
        strategy = default_strategy(m, layer.d)

    H_hat = layer.Q @ H
    VtY = _gather_columns(layer.V, Y, layer.D)
    Y_hat = layer.U.T @ VtY
    Z_hat = H_hat - Y_hat
    grad_H = 2.0 * Z_hat
    YtY = _sparse_gram(Y)
    M = H.T @ H_hat - (Y_hat.T @ H + H.T @ Y_hat) + YtY
    M = 0.5 * (M + M.T)  # symmetric up to the H^T Q H roundoff; make it exact
    loss = float(np.trace(M))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}: training diverged")

    trace_checked = False
    if verify_loss_trace:
        M1 = H.T @ Z_hat - Y_hat.T @ H + YtY
        if abs(float(np.trace(M1)) - loss) > 1e-8 * (1.0 + abs(loss)):
            raise FloatingPointError("loss-matrix variants disagree beyond roundoff")
        trace_checked = True

    if eta > 0.0:
        two_eta = 2.0 * eta
        if strategy.mode == "woodbury":
            _ensure_uinv_fresh(layer)
            new_uinv_t = woodbury_update_inverse(layer.Uinv_t, H, eta)
            layer.U -= two_eta * (layer.U @ H) @ H.T
            layer.Uinv_t = new_uinv_t
            layer.uinv_stale = False
            X = layer.Uinv_t @ H
        else:
            layer.U -= two_eta * (layer.U @ H) @ H.T
            X = solve_inverse_transpose_apply(layer.U, H)
            layer.uinv_stale = True
        for i, y in enumerate(Y):
            scatter_rank_one(layer.V, y, X[:, i], two_eta)
        S = H @ Z_hat.T
        T = (H @ M) @ H.T
        layer.Q += (4.0 * eta * eta) * (0.5 * (T + T.T)) - two_eta * (S + S.T)
        layer.steps_since_check += 1
        layer.step_count += 1
        if stab is not None:
            _stab.maybe_stabilize(layer, stab)
    return MinibatchResult(loss_total=loss, grad_H=grad_H, loss_matrix_trace_checked=trace_checked)
