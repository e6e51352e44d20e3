"""Exact O(d^2) online updates for a linear output layer with sparse targets.

The D x d output weight matrix W is never stored.  It is represented
implicitly as W = V U with V of shape D x d and U of shape d x d, alongside
two bookkeeping matrices: Uinv_t, tracking U^{-T}, and Q, tracking W^T W.
Per example, the squared-error loss, the gradient with respect to the hidden
vector, and the implicit gradient-descent update of W all cost O(d^2) plus
O(K d) for the K stored entries of the target -- independent of D.

One online step, for hidden vector h, sparse target y and learning rate eta:

    h_hat  = Q h
    y_hat  = U^T (V^T y)                       (V^T y is a K-row gather)
    z_hat  = h_hat - y_hat
    grad_h = 2 z_hat
    loss   = h.h_hat - 2 h.y_hat + y.y
    U      = U - 2 eta (U h) h^T
    Uinv_t = Uinv_t + (2 eta / (1 - 2 eta |h|^2)) (Uinv_t h) h^T
    V      = V + 2 eta y (Uinv_t_new h)^T      (K-row scatter)
    Q      = Q - 2 eta (h z_hat^T + z_hat h^T) + (4 eta^2 loss) h h^T

which reproduces, exactly up to roundoff, the dense update
W <- W - 2 eta (W h - y) h^T together with its loss and gradient.

The Uinv_t update is a rank-one inverse update and has a pole at
2 eta |h|^2 = 1, where the implicit U update is genuinely singular; steps
too close to it raise SingularUpdate rather than corrupting the state.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import stabilization as _stab
from .sparse import SparseVec, gather_rows_weighted, scatter_rank_one, sparse_sq_norm

CHECKPOINT_VERSION = 1

# |1 - 2 eta |h|^2| at or below this makes the implicit U update singular
SINGULAR_EPS = 1e-8


class SingularUpdate(ArithmeticError):
    """The step would make U singular (2 eta |h|^2 too close to 1); reduce eta."""


class DegenerateOutput(ArithmeticError):
    """Loss value undefined: selected output or whole-output norm is zero."""


@dataclasses.dataclass(frozen=True)
class StepResult:
    """Per-example squared-error loss and gradient w.r.t. the hidden vector."""

    loss: float
    grad_h: np.ndarray


@dataclasses.dataclass
class FactoredOutputLayer:
    """Implicit W = V U with maintained U^{-T} and Q = W^T W.

    Single-writer: steps that apply updates must be externally serialized.
    `madds` tallies multiply-adds per the online algorithm's per-step cost
    formulas (a debug counter, always on; nine integer adds per step).
    `uinv_stale` marks Uinv_t as lazily out of date after a solve-per-batch
    minibatch step; it is refreshed before the next use or check.
    """

    V: np.ndarray
    U: np.ndarray
    Uinv_t: np.ndarray
    Q: np.ndarray
    steps_since_check: int = 0
    step_count: int = 0
    uinv_stale: bool = False
    madds: int = 0

    @property
    def D(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]


def factored_new(
    D: int,
    d: int,
    init: str = "zeros",
    seed: int = 0,
    scale: float | None = None,
) -> FactoredOutputLayer:
    """Fresh layer in pristine state: U = Uinv_t = I, Q = V^T V.

    init="zeros" gives V = 0 and Q = 0 without forming the O(D d^2) Gram
    product.  init="random" draws V entries N(0, scale^2) with scale
    defaulting to 0.01/sqrt(d).
    """
    if D < 1 or d < 1:
        raise ValueError(f"dims must be positive, got D={D}, d={d}")
    if init == "zeros":
        V = np.zeros((D, d))
        Q = np.zeros((d, d))
    elif init == "random":
        if scale is None:
            scale = 0.01 / np.sqrt(d)
        rng = np.random.default_rng(seed)
        V = rng.standard_normal((D, d)) * scale
        Q = V.T @ V
        Q = 0.5 * (Q + Q.T)  # keep Q exactly symmetric from the start
    else:
        raise ValueError(f"init must be 'zeros' or 'random', got {init!r}")
    return FactoredOutputLayer(V=V, U=np.eye(d), Uinv_t=np.eye(d), Q=Q)


def _check_h(layer: FactoredOutputLayer, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.d,):
        raise ValueError(f"h must have shape ({layer.d},), got {h.shape}")
    return h


def _ensure_uinv_fresh(layer: FactoredOutputLayer) -> None:
    if layer.uinv_stale:
        _stab.recompute_inverse_transpose(layer)


def factored_step(
    layer: FactoredOutputLayer,
    h: np.ndarray,
    y: SparseVec,
    eta: float,
    apply_update: bool = True,
    stab: _stab.StabilizationConfig | None = None,
) -> StepResult:
    """One online step; loss and grad_h always refer to the pre-update weights.

    With apply_update=False only the loss/gradient half runs and the state is
    untouched.  Passing a StabilizationConfig runs the conditioning check
    after the update whenever its cadence is due.
    """
    h = _check_h(layer, h)
    if y.dim != layer.D:
        raise ValueError(f"y.dim {y.dim} != D {layer.D}")
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    d, K = layer.d, y.nnz

    h_hat = layer.Q @ h
    y_hat = layer.U.T @ gather_rows_weighted(layer.V, y)
    z_hat = h_hat - y_hat
    grad_h = 2.0 * z_hat
    loss = float(h @ h_hat - 2.0 * (h @ y_hat) + sparse_sq_norm(y))
    layer.madds += (d * d) + (K * d + d * d) + d + d + (2 * d + K + 1)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}: training diverged")

    if apply_update:
        _ensure_uinv_fresh(layer)
        denom = 1.0 - 2.0 * eta * float(h @ h)
        if abs(denom) <= SINGULAR_EPS:
            raise SingularUpdate(
                f"|1 - 2 eta |h|^2| = {abs(denom):.3e} <= {SINGULAR_EPS}; reduce eta"
            )
        two_eta = 2.0 * eta
        layer.U -= two_eta * np.outer(layer.U @ h, h)
        layer.Uinv_t += (two_eta / denom) * np.outer(layer.Uinv_t @ h, h)
        w = layer.Uinv_t @ h
        scatter_rank_one(layer.V, y, w, two_eta)
        layer.Q += (4.0 * eta * eta * loss) * np.outer(h, h) - two_eta * (
            np.outer(h, z_hat) + np.outer(z_hat, h)
        )
        layer.madds += (2 * d * d + d) + (2 * d * d + 2 * d + 3) + (d * d + K + K * d) + (3 * d * d + 2 * d + 4)
        layer.steps_since_check += 1
        layer.step_count += 1
        if stab is not None:
            _stab.maybe_stabilize(layer, stab)
    return StepResult(loss=loss, grad_h=grad_h)


def online_step_madds(d: int, K: int) -> int:
    """Closed-form multiply-add total of one full online step (all nine stages)."""
    return 10 * d * d + 2 * K * d + 9 * d + 2 * K + 8


def selected_outputs(layer: FactoredOutputLayer, h: np.ndarray, indices) -> np.ndarray:
    """Output coordinates o_c = V[c, :] (U h) for the given rows; O(d^2 + |indices| d)."""
    h = _check_h(layer, h)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= layer.D):
        raise IndexError(f"output index out of range [0, {layer.D})")
    uh = layer.U @ h
    return layer.V[idx] @ uh


def output_sq_norm(layer: FactoredOutputLayer, h: np.ndarray) -> float:
    """|W h|^2 as h^T Q h in O(d^2); tiny negative roundoff is clamped to 0."""
    h = _check_h(layer, h)
    return max(0.0, float(h @ (layer.Q @ h)))


def spherical_softmax_value(layer: FactoredOutputLayer, h: np.ndarray, c: int) -> float:
    """log(o_c^2 / |o|^2) for class c, computed without forming o.

    Only the epsilon = 0 member of the loss family is supported on this
    path; a nonzero epsilon needs a maintained column sum of V that the
    bookkeeping does not carry.  Raises DegenerateOutput when o_c or |o|
    vanishes.  The result is clamped to <= 0 (roundoff can push the ratio
    marginally past 1).
    """
    o_c = float(selected_outputs(layer, h, [int(c)])[0])
    sq = output_sq_norm(layer, h)
    if o_c == 0.0 or sq <= 0.0:
        raise DegenerateOutput(f"o_c = {o_c}, |o|^2 = {sq}")
    return min(0.0, float(np.log(o_c * o_c) - np.log(sq)))


def materialize(layer: FactoredOutputLayer) -> np.ndarray:
    """Explicit V U product.  O(D d^2): tests, pristine restore and export only."""
    return layer.V @ layer.U


def restore_pristine(layer: FactoredOutputLayer) -> None:
    """Fold U into V so that V = W and U = Uinv_t = I; W and Q are unchanged."""
    eye = np.eye(layer.d)
    if np.array_equal(layer.U, eye) and np.array_equal(layer.Uinv_t, eye):
        return
    layer.V = layer.V @ layer.U
    layer.U = eye
    layer.Uinv_t = np.eye(layer.d)
    layer.uinv_stale = False


def maintenance_residuals(layer: FactoredOutputLayer) -> tuple[float, float, float]:
    """Diagnostics: (Uinv_t^T U vs I, Q vs (VU)^T(VU), Q asymmetry), all relative.

    Materializes V U, so this is O(D d^2) -- for tests and checkpoint loads.
    """
    d = layer.d
    inv_res = np.linalg.norm(layer.Uinv_t.T @ layer.U - np.eye(d)) / np.sqrt(d)
    W = materialize(layer)
    G = W.T @ W
    q_norm = np.linalg.norm(layer.Q)
    q_res = np.linalg.norm(layer.Q - G) / max(q_norm, 1e-300)
    if q_norm == 0.0 and np.linalg.norm(G) == 0.0:
        q_res = 0.0
    asym = np.linalg.norm(layer.Q - layer.Q.T) / max(q_norm, 1e-300)
    if q_norm == 0.0:
        asym = 0.0
    return float(inv_res), float(q_res), float(asym)


def save_checkpoint(layer: FactoredOutputLayer, path) -> None:
    """Write V, U, Uinv_t, Q (row-major) with a (D, d, version) header to an npz."""
    np.savez(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        D=np.int64(layer.D),
        d=np.int64(layer.d),
        V=np.ascontiguousarray(layer.V),
        U=np.ascontiguousarray(layer.U),
        Uinv_t=np.ascontiguousarray(layer.Uinv_t),
        Q=np.ascontiguousarray(layer.Q),
    )


def load_checkpoint(path, tol: float = 1e-6) -> FactoredOutputLayer:
    """Load a checkpoint, verifying both maintenance invariants before accepting."""
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        D, d = int(z["D"]), int(z["d"])
        layer = FactoredOutputLayer(
            V=z["V"].astype(np.float64),
            U=z["U"].astype(np.float64),
            Uinv_t=z["Uinv_t"].astype(np.float64),
            Q=z["Q"].astype(np.float64),
        )
    if layer.V.shape != (D, d) or layer.U.shape != (d, d) or layer.Uinv_t.shape != (d, d) or layer.Q.shape != (d, d):
        raise ValueError("checkpoint array shapes do not match header")
    inv_res, q_res, _ = maintenance_residuals(layer)
    if inv_res > tol:
        raise ValueError(f"checkpoint rejected: Uinv_t^T U deviates from I by {inv_res:.3e}")
    if q_res > tol:
        raise ValueError(f"checkpoint rejected: Q deviates from (VU)^T(VU) by {q_res:.3e}")
    return layer
