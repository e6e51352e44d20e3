"""Conditioning control for the factored output layer.

Repeated implicit updates can drive the inner d x d factor ill-conditioned,
and its incrementally maintained transposed inverse can drift from the truth.
This module monitors the singular values of U on a fixed cadence and repairs
any that leave a safe range with a rank-one surgery that leaves the implicit
product V U (and hence the represented weights) unchanged.

Detection is either a full SVD (cheap for small d) or power iteration on U and
U^{-1} for the two extreme singular values.  The transposed inverse is always
recomputed from scratch immediately before a check.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .factored import FactoredOutputLayer

log = logging.getLogger(__name__)

DETECTORS = ("auto", "full_svd", "power_iteration")

# "auto" picks the exact detector while an SVD stays cheap
FULL_SVD_MAX_DIM = 64

# condition estimate above which U is treated as numerically singular
SINGULAR_COND = 1e14


class SingularMatrixError(ArithmeticError):
    """U is numerically singular; the layer cannot be repaired in place."""


@dataclasses.dataclass(frozen=True)
class StabilizationConfig:
    """Safe singular-value range, check cadence and detection budget."""

    sigma_low: float = 0.001
    sigma_high: float = 100.0
    n_check: int = 100
    power_iters: int = 100
    detector: str = "auto"

    def __post_init__(self):
        if not (0.0 < self.sigma_low < 1.0 <= self.sigma_high):
            raise ValueError(
                f"need 0 < sigma_low < 1 <= sigma_high, got [{self.sigma_low}, {self.sigma_high}]"
            )
        if self.n_check < 1:
            raise ValueError("n_check must be >= 1")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}")


@dataclasses.dataclass(frozen=True)
class SingularTriplet:
    """An extreme singular value of U and its unit left singular vector."""

    sigma: float
    left_vector: np.ndarray


@dataclasses.dataclass(frozen=True)
class FixEvent:
    """One singular-value repair, for the structured log stream."""

    step: int
    sigma_before: float
    sigma_after: float


def resolve_detector(config: StabilizationConfig, d: int) -> str:
    if config.detector != "auto":
        return config.detector
    return "full_svd" if d <= FULL_SVD_MAX_DIM else "power_iteration"


def power_extreme_singular(U: np.ndarray, which: str = "largest", iters: int = 100) -> SingularTriplet:
    """Power iteration for an extreme singular value of U.

    For the largest, iterates u <- normalize(U U^T u); for the smallest,
    iterates with (U U^T)^{-1} via an explicit inverse of U, since the
    largest singular value of U^{-1} is 1/sigma_min(U) and shares the left
    singular vector.  Returns (sigma, u) with u unit-norm.
    """
    if which not in ("largest", "smallest"):
        raise ValueError(f"which must be 'largest' or 'smallest', got {which!r}")
    d = U.shape[0]
    if U.shape != (d, d):
        raise ValueError("U must be square")
    rng = np.random.default_rng(0)  # fixed start keeps runs deterministic
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    if which == "largest":
        for _ in range(iters):
            w = U @ (U.T @ u)
            n = np.linalg.norm(w)
            if n == 0.0:
                break  # U == 0: sigma is 0, any unit vector works
            u = w / n
        return SingularTriplet(float(np.linalg.norm(U.T @ u)), u)
    Uinv = np.linalg.inv(U)  # raises LinAlgError on an exactly singular U
    for _ in range(iters):
        w = Uinv.T @ (Uinv @ u)
        u = w / np.linalg.norm(w)
    return SingularTriplet(float(1.0 / np.linalg.norm(Uinv @ u)), u)


def fix_singular_value(layer: "FactoredOutputLayer", sigma: float, u: np.ndarray, sigma_star: float) -> None:
    """Move one singular value of U to sigma_star, leaving V U unchanged.

    u must be (approximately) the unit left singular vector of U for sigma.
    U gets the rank-one correction that rescales that singular value, V gets
    the compensating correction, and the maintained U^{-T} is adjusted to
    match.  All other singular values and all singular vectors stay put.
    """
    if sigma <= 0.0 or sigma_star <= 0.0:
        raise ValueError("singular values must be positive")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (layer.d,):
        raise ValueError(f"u must have length {layer.d}")
    nu = np.linalg.norm(u)
    if abs(nu - 1.0) > 1e-6:
        raise ValueError(f"u must be unit norm, got |u| = {nu}")
    alpha = (sigma_star - sigma) / sigma
    beta = -alpha / (1.0 + alpha)
    t = layer.U.T @ u
    s = layer.Uinv_t.T @ u  # U^{-1} u via the maintained transpose
    vu = layer.V @ u
    layer.U += alpha * np.outer(u, t)
    layer.V += beta * np.outer(vu, u)
    layer.Uinv_t += beta * np.outer(u, s)


def recompute_inverse_transpose(layer: "FactoredOutputLayer") -> None:
    """Refresh U^{-T} from a fresh factorization of U.

    Raises SingularMatrixError when U is numerically singular (condition
    estimate beyond repair); the caller must restore from a checkpoint.
    """
    cond = np.linalg.cond(layer.U)
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularMatrixError(f"U numerically singular (cond estimate {cond:.3e})")
    layer.Uinv_t = np.linalg.inv(layer.U).T
    layer.uinv_stale = False


def singular_stabilize(layer: "FactoredOutputLayer", config: StabilizationConfig) -> list[FixEvent]:
    """Reset every singular value of U outside the safe range to 1.

    Recomputes U^{-T} from scratch first, then finds offending singular
    values with the configured detector and repairs each via
    fix_singular_value.  Returns the repair events (also logged).
    """
    recompute_inverse_transpose(layer)
    detector = resolve_detector(config, layer.d)
    step = layer.step_count
    events: list[FixEvent] = []

    if detector == "full_svd":
        ubar, sig, _ = np.linalg.svd(layer.U)
        for k in range(layer.d):
            if not (config.sigma_low <= sig[k] <= config.sigma_high):
                fix_singular_value(layer, float(sig[k]), ubar[:, k], 1.0)
                events.append(FixEvent(step, float(sig[k]), 1.0))
    else:
        for which, offending in (("largest", lambda s: s > config.sigma_high),
                                 ("smallest", lambda s: s < config.sigma_low)):
            for _ in range(layer.d):  # the loop is not bounded in principle; cap at d per check
                trip = power_extreme_singular(layer.U, which, config.power_iters)
                if not offending(trip.sigma):
                    break
                fix_singular_value(layer, trip.sigma, trip.left_vector, 1.0)
                events.append(FixEvent(step, trip.sigma, 1.0))
            else:
                log.warning("stabilization: %s-singular-value loop hit the %d-iteration cap", which, layer.d)

    for ev in events:
        log.info(
            "stabilization: step=%d sigma %.6e -> %.6e", ev.step, ev.sigma_before, ev.sigma_after
        )
    layer.steps_since_check = 0
    return events


def maybe_stabilize(layer: "FactoredOutputLayer", config: StabilizationConfig) -> list[FixEvent]:
    """Run singular_stabilize when the update cadence is due; otherwise no-op."""
    if layer.steps_since_check >= config.n_check:
        return singular_stabilize(layer, config)
    return []
