"""Objective change: diffusion-parameterized predictions to FM velocity.

Every supported head is affine in the prediction for a fixed state and
time, so the conversion is exposed both as endpoint estimates and as
per-sample coefficients ``(a, b)`` with ``velocity = a * x_dm + b * pred``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from diff2flow import bridge
from diff2flow.schedule import NoiseSchedule

VP_TOLERANCE = 1e-4


class Parameterization(str, enum.Enum):
    EPSILON = "epsilon"
    V = "v"
    X0 = "x0"
    VELOCITY = "velocity"


@dataclass(frozen=True)
class EndpointEstimate:
    x0_hat: np.ndarray
    xT_hat: np.ndarray


def _column(c):
    c = np.asarray(c, dtype=np.float64)
    return c[:, None] if c.ndim == 1 else c


def _check_vp(alpha, sigma) -> None:
    dev = np.abs(np.asarray(alpha) ** 2 + np.asarray(sigma) ** 2 - 1.0)
    if np.any(dev > VP_TOLERANCE):
        raise ValueError(f"coefficients off the VP circle by {float(np.max(dev)):.3g}")


def estimate_endpoints(pred, x_dm, alpha, sigma, p: Parameterization | str) -> EndpointEstimate:
    """Invert the diffusion interpolant ``x = alpha * x0 + sigma * xT``.

    ``alpha``/``sigma`` may be scalars or one value per batch row.
    """
    p = Parameterization(p)
    if p is Parameterization.VELOCITY:
        raise ValueError("velocity heads have no diffusion endpoints")
    _check_vp(alpha, sigma)
    pred = np.asarray(pred, dtype=np.float64)
    x_dm = np.asarray(x_dm, dtype=np.float64)
    a, s = _column(alpha), _column(sigma)
    if p is Parameterization.EPSILON:
        if np.any(a == 0.0):
            raise ZeroDivisionError("epsilon inversion needs alpha > 0")
        return EndpointEstimate((x_dm - s * pred) / a, pred.copy())
    if p is Parameterization.V:
        return EndpointEstimate(a * x_dm - s * pred, a * pred + s * x_dm)
    if np.any(s == 0.0):
        raise ZeroDivisionError("x0 inversion needs sigma > 0")
    return EndpointEstimate(pred.copy(), (x_dm - a * pred) / s)


def velocity_coefficients(alpha, sigma, p: Parameterization | str):
    """Return ``(a, b)`` such that ``velocity = a * x_dm + b * pred``.

    The v case gives ``(alpha - sigma) * x_dm - (alpha + sigma) * v``.
    """
    p = Parameterization(p)
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if p is Parameterization.VELOCITY:
        return np.zeros_like(alpha), np.ones_like(alpha)
    _check_vp(alpha, sigma)
    if p is Parameterization.V:
        return alpha - sigma, -(alpha + sigma)
    if p is Parameterization.EPSILON:
        if np.any(alpha == 0.0):
            raise ZeroDivisionError("epsilon inversion needs alpha > 0")
        return 1.0 / alpha, -(sigma + alpha) / alpha
    if np.any(sigma == 0.0):
        raise ZeroDivisionError("x0 inversion needs sigma > 0")
    return -1.0 / sigma, (sigma + alpha) / sigma


def velocity_from_diffusion(pred, x_fm, t_fm, s: NoiseSchedule, p: Parameterization | str) -> np.ndarray:
    """FM velocity at ``(x_fm, t_fm)`` from a prediction made on the DM trajectory.

    ``pred`` must be the model output at the bridged point
    ``x_fm_to_dm(x_fm, t_fm)``. Velocity heads pass through unchanged.
    """
    p = Parameterization(p)
    pred = np.asarray(pred, dtype=np.float64)
    if p is Parameterization.VELOCITY:
        return pred
    x_dm, t_dm = bridge.x_fm_to_dm(s, x_fm, t_fm)
    alpha, sigma = s.coeffs_at(t_dm)
    est = estimate_endpoints(pred, x_dm, alpha, sigma, p)
    return est.x0_hat - est.xT_hat
