import numpy as np
import pytest

from diff2flow import bridge
from diff2flow.net import TimeEmbedding, ToyModel
from diff2flow.sample import (
    SampleRun,
    ddim_timesteps,
    euler_integrate,
    sample,
    sample_ddim,
    straightness,
)
from diff2flow.schedule import make_linear_vp_schedule

S = make_linear_vp_schedule()


class FieldModel(ToyModel):
    """Velocity head driven by a closed-form field ``f(x, t_fm)``."""

    def __init__(self, field, param="velocity"):
        super().__init__(hidden=(2,), embedding=TimeEmbedding(2), param=param, rng=np.random.default_rng(0))
        self.field = field

    def forward(self, x, t, keep_cache=False):
        self.n_forward += 1
        out = self.field(np.asarray(x), np.asarray(t, dtype=float) / self.time_scale)
        return (out, None) if keep_cache else out


def test_constant_velocity_moves_by_constant():
    c = np.array([0.3, -1.2])
    m = FieldModel(lambda x, t: np.broadcast_to(c, x.shape))
    x0 = np.random.default_rng(0).standard_normal((5, 2))
    for n in (1, 7, 32):
        x1, _, _ = euler_integrate(m, S, x0, n)
        assert np.allclose(x1, x0 + c, atol=1e-12)


def test_linear_decay_field_converges_to_exponential():
    m = FieldModel(lambda x, t: -x)
    x0 = np.random.default_rng(1).standard_normal((4, 2))
    x1, _, _ = euler_integrate(m, S, x0, 1000)
    assert np.allclose(x1, x0 * np.exp(-1.0), rtol=1e-2)


def test_single_step_and_forward_counter():
    m = FieldModel(lambda x, t: 2 * x + t[:, None])
    x0 = np.ones((3, 2))
    x1, _, _ = euler_integrate(m, S, x0, 1)
    assert np.allclose(x1, x0 + 2 * x0)
    m.n_forward = 0
    sample(m, S, SampleRun(n_steps=17, n_samples=4))
    assert m.n_forward == 17


def test_trajectory_recording():
    m = FieldModel(lambda x, t: np.ones_like(x))
    x1, traj = sample(m, S, SampleRun(n_steps=4, n_samples=3, record_trajectory=True))
    assert traj.states.shape == (5, 3, 2)
    assert np.allclose(traj.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(traj.states[-1], x1)
    assert traj.convention == "fm"


def test_sampling_is_deterministic():
    m = ToyModel(rng=np.random.default_rng(3))
    run = SampleRun(n_steps=8, n_samples=64, seed=5)
    assert np.array_equal(sample(m, S, run), sample(m, S, run))
    assert not np.array_equal(sample(m, S, run), sample(m, S, SampleRun(n_steps=8, n_samples=64, seed=6)))


def test_ddim_with_perfect_oracle_recovers_data():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((10, 2))
    x_T = rng.standard_normal((10, 2))

    def field(x, t):
        # the v prediction whose data estimate is always ``target``
        a, s = S.coeffs_at(t)
        return (a * x - target) / s

    m = FieldModel(field, param="v")
    for mode, shift in (("ddim", 0.0), ("ddim_shifted", 0.5)):
        out = sample_ddim(m, S, SampleRun(n_steps=20, n_samples=10, mode=mode, shift=shift), x0=x_T)
        assert np.allclose(out, target, atol=1e-10)


def test_ddim_grid():
    ts = ddim_timesteps(S, 4)
    assert list(ts) == [751.0, 501.0, 251.0, 1.0]
    assert list(ddim_timesteps(S, 4, 0.5)) == [751.5, 501.5, 251.5, 1.5]
    with pytest.raises(ValueError):
        ddim_timesteps(S, 2000)
    s_small = make_linear_vp_schedule(T=4)
    with pytest.raises(ValueError):
        ddim_timesteps(s_small, 4, 0.5)  # stride 1: the first step lands at T + 0.5
    with pytest.raises(ValueError):
        SampleRun(shift=1.0)
    with pytest.raises(ValueError):
        SampleRun(n_steps=0)


def test_ddim_rejects_velocity_head():
    with pytest.raises(ValueError):
        sample_ddim(FieldModel(lambda x, t: x), S, SampleRun(mode="ddim"))


def test_straightness_zero_for_constant_field_and_positive_otherwise():
    m = FieldModel(lambda x, t: np.broadcast_to([1.0, 2.0], x.shape))
    assert straightness(m, S, n_probe=8, n_t=8) == pytest.approx(0.0, abs=1e-20)
    curved = FieldModel(lambda x, t: np.stack([np.cos(6 * t) + 0 * x[:, 0], x[:, 0]], axis=1))
    assert straightness(curved, S, n_probe=8, n_t=8) > 1e-3
    with pytest.raises(ValueError):
        straightness(m, S, n_probe=0)


def test_bridge_time_reaches_network_for_diffusion_heads():
    seen = []

    def field(x, t):
        seen.append(float(np.atleast_1d(t)[0]))
        return np.zeros_like(x)

    euler_integrate(FieldModel(field, param="v"), S, np.zeros((1, 2)), 4)
    expected = [float(bridge.t_fm_to_dm(S, k / 4)) for k in range(4)]
    assert np.allclose(seen, expected)
