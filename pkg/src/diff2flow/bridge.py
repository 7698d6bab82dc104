"""Invertible maps between diffusion and flow-matching trajectories.

Diffusion time runs ``0 (data) .. T (noise)``; flow-matching time runs
``0 (noise) .. 1 (data)``. The time map is ``alpha / (alpha + sigma)`` on
integer nodes and piecewise linear between them, so ``t_fm_to_dm`` is its
exact inverse on ``[t_dm_to_fm(T), 1]``. FM times below the terminal node
value have no preimage and clamp to ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diff2flow.schedule import NoiseSchedule


@dataclass(frozen=True)
class BridgedPoint:
    x: np.ndarray
    t_fm: float
    t_dm: float
    scale: float


def _as_array(t) -> tuple[np.ndarray, bool]:
    arr = np.asarray(t, dtype=np.float64)
    return arr, arr.ndim == 0


def t_dm_to_fm(s: NoiseSchedule, t):
    """Diffusion time to flow-matching time (strictly decreasing)."""
    t_arr, scalar = _as_array(t)
    s._check_range(t_arr)
    ft = s.node_fm_times
    lo = np.minimum(np.floor(t_arr).astype(np.int64), s.T)
    hi = np.minimum(lo + 1, s.T)
    frac = t_arr - lo
    out = np.where(frac == 0.0, ft[lo], ft[lo] + frac * (ft[hi] - ft[lo]))
    return float(out) if scalar else out


def t_fm_to_dm(s: NoiseSchedule, t):
    """Flow-matching time to continuous diffusion time.

    Brackets ``t`` between adjacent nodes ``f(k1) <= t <= f(k2)`` with
    ``k1 = k2 + 1`` and interpolates linearly. Returns exactly ``T`` for
    ``t <= f(T)``.
    """
    t_arr, scalar = _as_array(t)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("flow-matching time outside [0, 1]")
    ft = s.node_fm_times
    rising = ft[::-1]
    idx = np.searchsorted(rising, t_arr, side="left")
    clamped = t_arr <= ft[s.T]
    idx = np.clip(idx, 1, s.T)
    k2 = s.T - idx
    k1 = k2 + 1
    f1, f2 = ft[k1], ft[k2]
    exact = t_arr == f2
    interp = k1 + (t_arr - f1) / (f2 - f1) * (k2 - k1)
    out = np.where(exact, k2.astype(np.float64), interp)
    out = np.where(clamped, float(s.T), out)
    return float(out) if scalar else out


def scale_at(s: NoiseSchedule, t_dm):
    """State scale ``alpha + sigma`` at diffusion time ``t_dm``."""
    a, sg = s.coeffs_at(t_dm)
    return a + sg


def x_dm_to_fm(s: NoiseSchedule, x, t_dm):
    """Map a diffusion state to the flow-matching trajectory: ``x / (alpha + sigma)``.

    ``t_dm`` may be a scalar or one time per row of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(scale_at(s, t_dm))
    if scale.ndim == 1 and x.ndim == 2:
        scale = scale[:, None]
    return x / scale


def x_fm_to_dm(s: NoiseSchedule, x, t_fm):
    """Map a flow-matching state back to the diffusion trajectory.

    Returns ``(x_dm, t_dm)`` with ``x_dm = x * (alpha + sigma)`` evaluated at
    ``t_dm = t_fm_to_dm(t_fm)``.
    """
    x = np.asarray(x, dtype=np.float64)
    t_dm = t_fm_to_dm(s, t_fm)
    scale = np.asarray(scale_at(s, t_dm))
    if scale.ndim == 1 and x.ndim == 2:
        scale = scale[:, None]
    return x * scale, t_dm


def bridge_point(s: NoiseSchedule, x_fm, t_fm: float) -> BridgedPoint:
    x_dm, t_dm = x_fm_to_dm(s, x_fm, t_fm)
    return BridgedPoint(x=x_dm, t_fm=float(t_fm), t_dm=float(t_dm), scale=float(scale_at(s, t_dm)))


def bridge_table(s: NoiseSchedule, step: int = 1) -> np.ndarray:
    """Rows of ``(t_dm, t_fm, scale)`` on every ``step``-th integer node."""
    t = np.arange(0, s.T + 1, step, dtype=np.float64)
    if t[-1] != s.T:
        t = np.append(t, float(s.T))
    return np.column_stack([t, t_dm_to_fm(s, t), scale_at(s, t)])
