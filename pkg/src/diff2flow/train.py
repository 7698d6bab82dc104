"""Pretraining and finetuning regimes for the toy predictor.

All regimes draw, per step and in this order, data indices, a standard
normal batch and a uniform batch from a Philox stream keyed on
``(seed, step)``. Runs with equal seeds therefore see identical draws,
which is what makes regime comparisons paired.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from diff2flow import bridge
from diff2flow.convert import Parameterization, velocity_coefficients
from diff2flow.net import ToyModel
from diff2flow.schedule import NoiseSchedule, make_linear_vp_schedule

log = logging.getLogger(__name__)

REGIMES = ("diffusion_pretrain", "diffusion_finetune", "naive_fm", "diff2flow")
FINETUNE_REGIMES = ("diffusion_finetune", "naive_fm", "diff2flow")


@dataclass
class TrainConfig:
    regime: str = "diffusion_pretrain"
    steps: int = 20_000
    batch: int = 256
    lr: float = 1e-3
    lr_schedule: str = "constant"
    seed: int = 0
    lora_rank: int | None = None
    lora_fraction: float | None = None
    dataset: str = "two_moons"
    n_data: int = 50_000
    param: str = "v"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    naive_time_mode: str = "scaled"
    log_every: int = 100
    eval_every: int = 0
    eval_samples: int = 1000
    eval_nfe: int = 32

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.lr_schedule not in ("constant", "cosine_decay"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.naive_time_mode not in ("scaled", "unit"):
            raise ValueError(f"unknown naive_time_mode {self.naive_time_mode!r}")
        if self.lora_rank is not None and self.lora_fraction is not None:
            raise ValueError("set at most one of lora_rank / lora_fraction")

    @property
    def uses_lora(self) -> bool:
        return self.lora_rank is not None or self.lora_fraction is not None

    def schedule(self) -> NoiseSchedule:
        return make_linear_vp_schedule(self.T, self.beta_min, self.beta_max)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)


@dataclass
class MetricTrace:
    records: list[dict] = field(default_factory=list)

    def log(self, iteration: int, loss: float, eval_distance: float | None, wall_ms: float) -> None:
        if self.records and iteration <= self.records[-1]["iter"]:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append({"iter": int(iteration), "loss": float(loss), "eval": eval_distance,
                             "wall_ms": float(wall_ms)})

    @property
    def iterations(self) -> list[int]:
        return [r["iter"] for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "MetricTrace":
        trace = cls()
        with open(path) as fh:
            trace.records = [json.loads(line) for line in fh if line.strip()]
        return trace


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent counter-based stream for one training step."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def fm_loss(velocity_estimate, x0, x1) -> float:
    """Mean squared error between the estimate and the straight displacement ``x1 - x0``."""
    v = np.asarray(velocity_estimate, dtype=np.float64)
    target = np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    if v.shape != target.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((target - v) ** 2))


def _mse_and_grad(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = output - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def draw_fm(rng: np.random.Generator, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Noise batch and uniform times, always in this order."""
    x0 = rng.standard_normal(shape)
    u = rng.random(shape[0])
    return x0, u


def diffusion_loss(m: ToyModel, x1, s: NoiseSchedule, rng: np.random.Generator):
    """Simple denoising loss with an epsilon or v target.

    ``t`` is uniform on ``{1..T}``; returns ``(loss, grads)``.
    """
    if m.param not in (Parameterization.EPSILON, Parameterization.V):
        raise ValueError(f"diffusion loss needs an epsilon or v head, got {m.param.value}")
    x1 = np.asarray(x1, dtype=np.float64)
    eps, u = draw_fm(rng, x1.shape)
    t = np.minimum(1 + np.floor(u * s.T).astype(np.int64), s.T)
    a = s.alpha[t][:, None]
    sg = s.sigma[t][:, None]
    x_t = a * x1 + sg * eps
    target = eps if m.param is Parameterization.EPSILON else a * eps - sg * x1
    pred, cache = m.forward(x_t, t.astype(np.float64), keep_cache=True)
    loss, g = _mse_and_grad(pred, target)
    return loss, m.backward(g, cache)


def diff2flow_velocity(m: ToyModel, s: NoiseSchedule, x_fm, t_fm, keep_cache: bool = False):
    """Query ``m`` on the bridged DM point and convert the output to FM velocity.

    With ``keep_cache`` also returns ``(cache, b)`` where ``b`` is the
    per-row coefficient of the prediction in the affine conversion.
    """
    x_fm = np.asarray(x_fm, dtype=np.float64)
    t_fm = np.broadcast_to(np.asarray(t_fm, dtype=np.float64), (x_fm.shape[0],))
    if m.param is Parameterization.VELOCITY:
        out = m.forward(x_fm, t_fm * m.time_scale, keep_cache=keep_cache)
        if keep_cache:
            return out[0], (out[1], np.ones((x_fm.shape[0], 1)))
        return out
    x_dm, t_dm = bridge.x_fm_to_dm(s, x_fm, t_fm)
    alpha, sigma = s.coeffs_at(t_dm)
    a, b = velocity_coefficients(alpha, sigma, m.param)
    a, b = a[:, None], b[:, None]
    if keep_cache:
        pred, cache = m.forward(x_dm, t_dm, keep_cache=True)
        return a * x_dm + b * pred, (cache, b)
    return a * x_dm + b * m.forward(x_dm, t_dm)


def diff2flow_step(m: ToyModel, x1, s: NoiseSchedule, rng: np.random.Generator, x0=None):
    """One Diff2Flow training evaluation; returns ``(loss, grads)``.

    FM interpolant, bridge to DM coordinates, predict, convert to velocity,
    regress onto ``x1 - x0``. ``x0`` may be supplied (fixed couplings); a
    normal batch is still drawn so the stream stays aligned.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    noise, t = draw_fm(rng, x1.shape)
    x0 = noise if x0 is None else np.asarray(x0, dtype=np.float64)
    x_fm = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    v, (cache, b) = diff2flow_velocity(m, s, x_fm, t, keep_cache=True)
    loss, g = _mse_and_grad(v, x1 - x0)
    return loss, m.backward(b * g, cache)


def naive_time_scale(s: NoiseSchedule, mode: str) -> float:
    return float(s.T) if mode == "scaled" else 1.0


def naive_fm_step(m: ToyModel, x1, s: NoiseSchedule, rng: np.random.Generator, time_mode: str = "scaled",
                  x0=None):
    """FM loss applied directly to the raw network output (baseline).

    The network sees ``x_fm`` unscaled at time ``t_fm * T`` (``scaled``) or
    ``t_fm`` (``unit``).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    noise, t = draw_fm(rng, x1.shape)
    x0 = noise if x0 is None else np.asarray(x0, dtype=np.float64)
    x_fm = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    pred, cache = m.forward(x_fm, t * naive_time_scale(s, time_mode), keep_cache=True)
    loss, g = _mse_and_grad(pred, x1 - x0)
    return loss, m.backward(g, cache)


class Adam:
    """Adaptive-moment updates applied in place to a model's trainable arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: ToyModel, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        params = model.trainable_parameters()
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            params[name] -= (lr / c1) * m / denom
        model.mark_updated()


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps == 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


def prepare_model(cfg: TrainConfig, init: ToyModel | None, s: NoiseSchedule) -> ToyModel:
    """Fresh model for pretraining, or a configured copy of ``init`` for finetuning."""
    if cfg.regime == "diffusion_pretrain":
        if init is not None:
            return init.clone()
        return ToyModel(param=cfg.param, rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 7])))
    if init is None:
        raise ValueError(f"regime {cfg.regime} needs a pretrained init model")
    m = init.clone()
    if cfg.uses_lora:
        m.attach_lora(rank=cfg.lora_rank, fraction=cfg.lora_fraction,
                      rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 11])))
    if cfg.regime == "naive_fm":
        m.param = Parameterization.VELOCITY
        m.time_scale = naive_time_scale(s, cfg.naive_time_mode)
    return m


def step_function(cfg: TrainConfig) -> Callable:
    if cfg.regime in ("diffusion_pretrain", "diffusion_finetune"):
        return lambda m, x1, s, rng, x0=None: diffusion_loss(m, x1, s, rng)
    if cfg.regime == "naive_fm":
        return lambda m, x1, s, rng, x0=None: naive_fm_step(m, x1, s, rng, cfg.naive_time_mode, x0=x0)
    return diff2flow_step


def run_training(
    cfg: TrainConfig,
    data,
    init: ToyModel | None = None,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
    evaluate: Callable[[ToyModel], float] | None = None,
) -> tuple[ToyModel, MetricTrace]:
    """Train for ``cfg.steps`` steps and return ``(model, trace)``.

    ``data`` is the pool of data points indexed each step. With ``pairs``
    (``x0``, ``x1``) the batch indexes fixed couplings instead, and ``data``
    is ignored. ``evaluate`` is called every ``cfg.eval_every`` steps.
    """
    s = cfg.schedule()
    m = prepare_model(cfg, init, s)
    trace = MetricTrace()
    if cfg.steps == 0:
        return m, trace
    step_fn = step_function(cfg)
    opt = Adam(cfg.lr)
    pool_x0, pool_x1 = (None, np.asarray(data, dtype=np.float64)) if pairs is None else pairs
    n_pool = pool_x1.shape[0]
    start = time.perf_counter()
    window: list[float] = []
    for step in range(cfg.steps):
        rng = step_rng(cfg.seed, step)
        idx = rng.integers(0, n_pool, cfg.batch)
        x0 = None if pool_x0 is None else pool_x0[idx]
        loss, grads = step_fn(m, pool_x1[idx], s, rng, x0=x0)
        opt.step(m, grads, learning_rate(cfg, step))
        window.append(loss)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.steps:
            ev = None
            if evaluate is not None and cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
                ev = float(evaluate(m))
            wall = (time.perf_counter() - start) * 1000.0
            trace.log(done, float(np.mean(window)), ev, wall)
            log.debug("%s step %d loss %.5f eval %s", cfg.regime, done, trace.records[-1]["loss"], ev)
            window.clear()
    return m, trace


def initial_fm_loss(m: ToyModel, regime: str, data, s: NoiseSchedule, seed: int, batch: int,
                    time_mode: str = "scaled") -> float:
    """FM loss of an untrained model on exactly the step-0 draws of ``run_training``."""
    data = np.asarray(data, dtype=np.float64)
    rng = step_rng(seed, 0)
    x1 = data[rng.integers(0, data.shape[0], batch)]
    if regime == "diff2flow":
        return diff2flow_step(m, x1, s, rng)[0]
    if regime == "naive_fm":
        probe = m.clone()
        probe.param = Parameterization.VELOCITY
        probe.time_scale = naive_time_scale(s, time_mode)
        return naive_fm_step(probe, x1, s, rng, time_mode)[0]
    raise ValueError(f"no FM loss for regime {regime!r}")


def save_run(out_dir, model: ToyModel, trace: MetricTrace, name: str = "model") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"{name}.d2f")
    trace.write_jsonl(out / f"{name}.trace.jsonl")
    return out
