"""Generation: Euler sampling on the FM trajectory, DDIM, shifted DDIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diff2flow.convert import Parameterization, estimate_endpoints
from diff2flow.net import ToyModel
from diff2flow.schedule import NoiseSchedule
from diff2flow.train import diff2flow_velocity

MODES = ("diff2flow_euler", "ddim", "ddim_shifted")


@dataclass(frozen=True)
class SampleRun:
    n_steps: int = 32
    n_samples: int = 1000
    seed: int = 0
    mode: str = "diff2flow_euler"
    shift: float = 0.0
    record_trajectory: bool = False

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.shift < 1.0:
            raise ValueError("shift must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class Trajectory:
    states: np.ndarray  # (N + 1, n, d)
    times: np.ndarray  # (N + 1,)
    convention: str  # "fm" (increasing) or "dm" (decreasing)


def initial_noise(run: SampleRun, dim: int, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(run.seed)
    return rng.standard_normal((run.n_samples, dim))


def euler_integrate(m: ToyModel, s: NoiseSchedule, x0, n_steps: int, record: bool = False):
    """Forward Euler from FM time 0 to 1; returns ``(x1, trajectory, velocities)``."""
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = 1.0 / n_steps
    states = [x.copy()] if record else None
    velocities = [] if record else None
    for k in range(n_steps):
        v = diff2flow_velocity(m, s, x, k * dt)
        if record:
            velocities.append(v)
        x = x + dt * v
        if record:
            states.append(x.copy())
    traj = None
    if record:
        traj = Trajectory(np.stack(states), np.arange(n_steps + 1) * dt, "fm")
        velocities = np.stack(velocities)
    return x, traj, velocities


def sample_diff2flow(m: ToyModel, s: NoiseSchedule, run: SampleRun, rng: np.random.Generator | None = None,
                     x0=None):
    """Euler-sample ``m`` through the diffusion-to-flow bridge.

    Returns samples, or ``(samples, trajectory)`` when ``run.record_trajectory``.
    Works for velocity heads too (the conversion is then the identity).
    """
    x0 = initial_noise(run, m.data_dim, rng) if x0 is None else x0
    x1, traj, _ = euler_integrate(m, s, x0, run.n_steps, run.record_trajectory)
    return (x1, traj) if run.record_trajectory else x1


def ddim_timesteps(s: NoiseSchedule, n_steps: int, shift: float = 0.0) -> np.ndarray:
    """Largest-first grid ``1 + k * (T // N)`` plus ``shift``."""
    stride = s.T // n_steps
    if stride < 1:
        raise ValueError(f"cannot take {n_steps} DDIM steps on T={s.T}")
    ts = (1 + stride * np.arange(n_steps))[::-1].astype(np.float64) + shift
    if ts[0] > s.T or ts[-1] < 0:
        raise ValueError(f"shift {shift} pushes timesteps outside [0, {s.T}]")
    return ts


def sample_ddim(m: ToyModel, s: NoiseSchedule, run: SampleRun, rng: np.random.Generator | None = None, x0=None):
    """Deterministic DDIM by re-noising the estimated endpoints.

    ``run.mode == "ddim_shifted"`` queries the network at the shifted,
    non-integer timesteps with interpolated coefficients.
    """
    if m.param is Parameterization.VELOCITY:
        raise ValueError("DDIM needs a diffusion-parameterized head")
    shift = run.shift if run.mode == "ddim_shifted" else 0.0
    ts = ddim_timesteps(s, run.n_steps, shift)
    x = initial_noise(run, m.data_dim, rng) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    states = [x.copy()]
    est = None
    for i, t in enumerate(ts):
        alpha, sigma = s.coeffs_at(t)
        est = estimate_endpoints(m.forward(x, t), x, alpha, sigma, m.param)
        if i + 1 < len(ts):
            a_next, s_next = s.coeffs_at(ts[i + 1])
            x = a_next * est.x0_hat + s_next * est.xT_hat
        else:
            x = est.x0_hat
        states.append(x.copy())
    if run.record_trajectory:
        times = np.append(ts, 0.0)
        return x, Trajectory(np.stack(states), times, "dm")
    return x


def sample(m: ToyModel, s: NoiseSchedule, run: SampleRun, rng: np.random.Generator | None = None, x0=None):
    if run.mode == "diff2flow_euler":
        return sample_diff2flow(m, s, run, rng, x0)
    return sample_ddim(m, s, run, rng, x0)


def straightness(m: ToyModel, s: NoiseSchedule, n_probe: int = 64, n_t: int = 32,
                 rng: np.random.Generator | None = None, n_ref: int = 256) -> float:
    """Mean squared deviation of the velocity from the chord ``x1 - x0``.

    Integrates ``n_probe`` noise draws at ``n_ref`` Euler steps, then
    averages ``||(x1 - x0) - v(x_t, t)||^2`` over an ``n_t``-point time grid
    of the same simulated path. Zero for perfectly straight flows.
    """
    if n_probe < 1 or n_t < 1:
        raise ValueError("n_probe and n_t must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x0 = rng.standard_normal((n_probe, m.data_dim))
    x1, _, vel = euler_integrate(m, s, x0, n_ref, record=True)
    grid = (np.arange(n_t) * n_ref) // n_t
    chord = x1 - x0
    dev = chord[None, :, :] - vel[grid]
    return float(np.mean(np.sum(dev * dev, axis=-1)))
