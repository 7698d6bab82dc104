"""Discrete variance-preserving noise schedules with continuous lookup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficients on the integer grid ``0..T``.

    Node 0 is the exact clean-data node ``(alpha, sigma) = (1, 0)``. Between
    integer nodes both coefficients are interpolated linearly and
    independently, so off-node values sit slightly inside the VP circle.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    _ft: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if alpha.shape != (self.T + 1,) or sigma.shape != (self.T + 1,):
            raise ValueError("alpha and sigma must have length T + 1")
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        ft = alpha / (alpha + sigma)
        ft.setflags(write=False)
        object.__setattr__(self, "_ft", ft)

    @property
    def node_fm_times(self) -> np.ndarray:
        """``alpha / (alpha + sigma)`` at every integer node (decreasing)."""
        return self._ft

    def _check_range(self, t: np.ndarray) -> None:
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"diffusion time outside [0, {self.T}]")

    def coeffs_at(self, t):
        """Return ``(alpha, sigma)`` at continuous diffusion time ``t``.

        Integer ``t`` returns node values bit-exactly. Accepts scalars or
        arrays; no extrapolation outside ``[0, T]``.
        """
        t_arr = np.asarray(t, dtype=np.float64)
        self._check_range(t_arr)
        lo = np.floor(t_arr).astype(np.int64)
        lo = np.minimum(lo, self.T)
        frac = t_arr - lo
        hi = np.minimum(lo + 1, self.T)
        a_lo, a_hi = self.alpha[lo], self.alpha[hi]
        s_lo, s_hi = self.sigma[lo], self.sigma[hi]
        on_node = frac == 0.0
        a = np.where(on_node, a_lo, a_lo + frac * (a_hi - a_lo))
        s = np.where(on_node, s_lo, s_lo + frac * (s_hi - s_lo))
        if a.ndim == 0:
            return float(a), float(s)
        return a, s

    def snr_at(self, t):
        """Signal-to-noise ratio ``alpha**2 / sigma**2``; ``inf`` where sigma is 0."""
        a, s = self.coeffs_at(t)
        a = np.asarray(a)
        s = np.asarray(s)
        with np.errstate(divide="ignore"):
            snr = np.where(s == 0.0, np.inf, a * a / np.where(s == 0.0, 1.0, s * s))
        return float(snr) if snr.ndim == 0 else snr

    def vp_deviation_bound(self) -> float:
        """Upper bound on ``|alpha**2 + sigma**2 - 1|`` between adjacent nodes."""
        da = np.diff(self.alpha)
        ds = np.diff(self.sigma)
        return float(np.max((da * da + ds * ds) / 4.0))


def make_linear_vp_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """DDPM linear-beta schedule with an exact clean node prepended.

    ``alpha_t = sqrt(prod_{s<=t} (1 - beta_s))`` for ``t >= 1`` and
    ``sigma_t = sqrt(1 - alpha_t**2)``.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    alpha = np.empty(T + 1)
    sigma = np.empty(T + 1)
    alpha[0], sigma[0] = 1.0, 0.0
    alpha[1:] = np.sqrt(alpha_bar)
    sigma[1:] = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(int(T), alpha, sigma)
