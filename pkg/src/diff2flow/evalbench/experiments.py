"""Paired experiments reproducing the qualitative claims on toy data.

Each experiment runs ``n_seeds`` paired replicates, writes traces and
distance reports under ``out_dir/<name>/``, and renders a summary table
(``summary.txt``) plus one JSON record per row (``summary.jsonl``).
Summaries contain no timings, so reruns at the same seeds are identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from diff2flow import bridge
from diff2flow.evalbench.datasets import make_dataset
from diff2flow.evalbench.metrics import distance_report, median_bandwidth, sliced_w2
from diff2flow.net import ToyModel
from diff2flow.reflow import generate_pairs, rectify
from diff2flow.sample import SampleRun, sample_ddim, sample_diff2flow, straightness
from diff2flow.schedule import NoiseSchedule, make_linear_vp_schedule
from diff2flow.train import TrainConfig, initial_fm_loss, run_training

log = logging.getLogger(__name__)

EXPERIMENTS = ("convergence_full", "convergence_lora", "reflow_fewstep", "shifted_ddim", "terminal_snr")


@dataclass
class ExperimentConfig:
    dataset: str = "two_moons"
    reflow_dataset: str = "eight_gaussians"
    param: str = "v"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    n_seeds: int = 3
    n_data: int = 50_000
    batch: int = 256
    pretrain_steps: int = 20_000
    pretrain_lr: float = 1e-3
    finetune_steps: int = 2_000
    finetune_lr: float = 1e-4
    lora_fraction: float = 0.2
    naive_time_mode: str = "scaled"
    regimes: tuple[str, ...] = ("diff2flow", "naive_fm", "diffusion_finetune")
    nfe: int = 32
    n_eval: int = 2_000
    n_proj: int = 128
    reflow_pairs: int = 20_000
    reflow_gen_steps: int = 64
    reflow_steps: int = 4_000
    reflow_lr: float = 1e-3
    reflow_lora_rank: int | None = None
    few_steps: int = 2
    n_probe: int = 64
    n_t: int = 32
    ddim_nfe: int = 32
    shift: float = 0.5
    log_every: int = 100
    cache_dir: str | None = None

    def schedule(self) -> NoiseSchedule:
        return make_linear_vp_schedule(self.T, self.beta_min, self.beta_max)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        mapping = dict(mapping)
        if "regimes" in mapping:
            mapping["regimes"] = tuple(mapping["regimes"])
        return cls(**mapping)


@dataclass
class ExperimentResult:
    name: str
    rows: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    soft_checks: dict[str, bool] = field(default_factory=dict)
    summary: str = ""

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# -- shared pieces -----------------------------------------------------------


def model_digest(m: ToyModel) -> str:
    return hashlib.sha256(m.to_bytes()).hexdigest()[:16]


def seeds_for(base_seed: int, n_seeds: int) -> list[int]:
    return [base_seed + k for k in range(n_seeds)]


def eval_set(dataset: str, n: int, base_seed: int) -> np.ndarray:
    return make_dataset(dataset, n, seed=base_seed + 10_000)


def eval_noise(n: int, base_seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([base_seed, 20_000])).standard_normal((n, 2))


def get_prior(cfg: ExperimentConfig, dataset: str, base_seed: int) -> ToyModel:
    """Pretrained diffusion prior, loaded from ``cfg.cache_dir`` when present."""
    path = None
    if cfg.cache_dir:
        key = f"prior_{dataset}_{cfg.param}_T{cfg.T}_{cfg.pretrain_steps}_{cfg.pretrain_lr}_{cfg.batch}_s{base_seed}.d2f"
        path = Path(cfg.cache_dir) / key
        if path.exists():
            return ToyModel.load(path)
    tcfg = TrainConfig(regime="diffusion_pretrain", steps=cfg.pretrain_steps, batch=cfg.batch, lr=cfg.pretrain_lr,
                       seed=base_seed, dataset=dataset, param=cfg.param, T=cfg.T, beta_min=cfg.beta_min,
                       beta_max=cfg.beta_max, log_every=cfg.log_every)
    data = make_dataset(dataset, cfg.n_data, seed=base_seed + 1)
    log.info("pretraining %s prior on %s for %d steps", cfg.param, dataset, cfg.pretrain_steps)
    prior, _ = run_training(tcfg, data)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        prior.save(path)
    return prior


def regime_samples(m: ToyModel, regime: str, s: NoiseSchedule, noise: np.ndarray, nfe: int) -> np.ndarray:
    """Samples with the sampler that matches how ``regime`` trained the model."""
    run = SampleRun(n_steps=nfe, n_samples=noise.shape[0])
    if regime in ("diffusion_finetune", "diffusion_pretrain"):
        return sample_ddim(m, s, run, x0=noise)
    return sample_diff2flow(m, s, run, x0=noise)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("D2F_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, jobs: list) -> list:
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# -- convergence ---------------------------------------------------------------


def _convergence_seed(job) -> list[dict]:
    cfg, prior_bytes, seed, base_seed, lora, out_dir = job
    prior = ToyModel.from_bytes(prior_bytes)
    s = cfg.schedule()
    data = make_dataset(cfg.dataset, cfg.n_data, seed=seed + 5_000)
    ev = eval_set(cfg.dataset, cfg.n_eval, base_seed)
    noise = eval_noise(cfg.n_eval, base_seed)
    bandwidth = median_bandwidth(ev)
    init_eval = sliced_w2(sample_diff2flow(prior, s, SampleRun(cfg.nfe, cfg.n_eval), x0=noise), ev, cfg.n_proj)
    rows = []
    for regime in cfg.regimes:
        tcfg = TrainConfig(regime=regime, steps=cfg.finetune_steps, batch=cfg.batch, lr=cfg.finetune_lr, seed=seed,
                           dataset=cfg.dataset, param=cfg.param, T=cfg.T, beta_min=cfg.beta_min,
                           beta_max=cfg.beta_max, naive_time_mode=cfg.naive_time_mode, log_every=cfg.log_every,
                           lora_fraction=cfg.lora_fraction if lora else None)
        init_loss = None
        if regime in ("diff2flow", "naive_fm"):
            init_loss = initial_fm_loss(prior, regime, data, s, seed, cfg.batch, cfg.naive_time_mode)
        model, trace = run_training(tcfg, data, init=prior)
        samples = regime_samples(model, regime, s, noise, cfg.nfe)
        rep = distance_report(samples, ev, cfg.n_proj, bandwidth=bandwidth)
        run_dir = Path(out_dir) / f"{regime}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        trace.write_jsonl(run_dir / "trace.jsonl")
        model.save(run_dir / "model.d2f")
        (run_dir / "distance.json").write_text(json.dumps(asdict(rep), sort_keys=True) + "\n")
        rows.append({
            "regime": regime,
            "seed": seed,
            "lora": bool(lora),
            "trainable": model.n_parameters(trainable_only=True),
            "init_digest": model_digest(prior),
            "init_eval": init_eval,
            "init_fm_loss": init_loss,
            "final_loss": trace.losses[-1] if trace.records else None,
            "sliced_w2": rep.sliced_w2,
            "mmd_rbf": rep.mmd_rbf,
        })
    return rows


def _convergence(cfg: ExperimentConfig, base_seed: int, out_dir: Path, lora: bool) -> ExperimentResult:
    name = "convergence_lora" if lora else "convergence_full"
    prior = get_prior(cfg, cfg.dataset, base_seed)
    jobs = [(cfg, prior.to_bytes(), seed, base_seed, lora, out_dir) for seed in seeds_for(base_seed, cfg.n_seeds)]
    rows = [row for rows in _map(_convergence_seed, jobs) for row in rows]
    res = ExperimentResult(name, list(rows))
    med = {r: _median([row["sliced_w2"] for row in rows if row["regime"] == r]) for r in cfg.regimes}
    for r, v in med.items():
        res.rows.append({"regime": r, "seed": "median", "sliced_w2": v})
    if "diff2flow" in med and "naive_fm" in med:
        factor = 0.9 if lora else 1.0
        res.checks[f"diff2flow_sw2 <= {factor} * naive_fm_sw2"] = med["diff2flow"] <= factor * med["naive_fm"]
        warm = [(a["init_fm_loss"], b["init_fm_loss"]) for a in rows for b in rows
                if a["regime"] == "diff2flow" and b["regime"] == "naive_fm" and a["seed"] == b["seed"]]
        res.soft_checks["warm_start: diff2flow init loss < naive init loss"] = (
            _median([w[0] for w in warm]) < _median([w[1] for w in warm]))
    return res


# -- reflow --------------------------------------------------------------------


def _reflow_seed(job) -> dict:
    cfg, prior_bytes, seed, base_seed, out_dir = job
    base = ToyModel.from_bytes(prior_bytes)
    s = cfg.schedule()
    ev = eval_set(cfg.reflow_dataset, cfg.n_eval, base_seed)
    noise = eval_noise(cfg.n_eval, base_seed)
    pairs = generate_pairs(base, s, cfg.reflow_pairs, cfg.reflow_gen_steps, seed)
    tcfg = TrainConfig(regime="diff2flow", steps=cfg.reflow_steps, batch=cfg.batch, lr=cfg.reflow_lr, seed=seed,
                       dataset=cfg.reflow_dataset, param=cfg.param, T=cfg.T, beta_min=cfg.beta_min,
                       beta_max=cfg.beta_max, log_every=cfg.log_every, lora_rank=cfg.reflow_lora_rank)
    rect, trace = rectify(base, pairs, tcfg)
    probe = np.random.SeedSequence([base_seed, 30_000])
    s_before = straightness(base, s, cfg.n_probe, cfg.n_t, np.random.default_rng(probe))
    s_after = straightness(rect, s, cfg.n_probe, cfg.n_t, np.random.default_rng(probe))
    few = SampleRun(cfg.few_steps, cfg.n_eval)
    many = SampleRun(cfg.reflow_gen_steps, cfg.n_eval)
    base_many = sample_diff2flow(base, s, many, x0=noise)
    rect_many = sample_diff2flow(rect, s, many, x0=noise)
    run_dir = Path(out_dir) / f"rectified_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    trace.write_jsonl(run_dir / "trace.jsonl")
    rect.save(run_dir / "model.d2f")
    return {
        "seed": seed,
        "straightness_before": s_before,
        "straightness_after": s_after,
        "sw2_few_before": sliced_w2(sample_diff2flow(base, s, few, x0=noise), ev, cfg.n_proj),
        "sw2_few_after": sliced_w2(sample_diff2flow(rect, s, few, x0=noise), ev, cfg.n_proj),
        "sw2_many_before": sliced_w2(base_many, ev, cfg.n_proj),
        "sw2_many_after": sliced_w2(rect_many, ev, cfg.n_proj),
        "sw2_rect_vs_base": sliced_w2(rect_many, base_many, cfg.n_proj),
    }


def _reflow(cfg: ExperimentConfig, base_seed: int, out_dir: Path) -> ExperimentResult:
    prior = get_prior(cfg, cfg.reflow_dataset, base_seed)
    jobs = [(cfg, prior.to_bytes(), seed, base_seed, out_dir) for seed in seeds_for(base_seed, cfg.n_seeds)]
    rows = _map(_reflow_seed, jobs)
    res = ExperimentResult("reflow_fewstep", list(rows))
    med = {k: _median([r[k] for r in rows]) for k in rows[0] if k != "seed"}
    res.rows.append({"seed": "median", **med})
    res.checks["straightness_after < straightness_before"] = med["straightness_after"] < med["straightness_before"]
    res.checks[f"sw2@{cfg.few_steps}steps after < before"] = med["sw2_few_after"] < med["sw2_few_before"]
    res.soft_checks["marginal: sw2(rect, base) <= 2 * sw2(base, data)"] = (
        med["sw2_rect_vs_base"] <= 2.0 * med["sw2_many_before"])
    return res


# -- shifted DDIM ----------------------------------------------------------------


def _shifted_ddim(cfg: ExperimentConfig, base_seed: int, out_dir: Path) -> ExperimentResult:
    prior = get_prior(cfg, cfg.dataset, base_seed)
    s = cfg.schedule()
    ev = eval_set(cfg.dataset, cfg.n_eval, base_seed)
    rows = []
    for seed in seeds_for(base_seed, cfg.n_seeds):
        noise = np.random.default_rng(np.random.SeedSequence([seed, 40_000])).standard_normal((cfg.n_eval, 2))
        plain = sample_ddim(prior, s, SampleRun(cfg.ddim_nfe, cfg.n_eval, mode="ddim"), x0=noise)
        shifted = sample_ddim(prior, s, SampleRun(cfg.ddim_nfe, cfg.n_eval, mode="ddim_shifted", shift=cfg.shift),
                              x0=noise)
        a = sliced_w2(plain, ev, cfg.n_proj)
        b = sliced_w2(shifted, ev, cfg.n_proj)
        rows.append({"seed": seed, "nfe": cfg.ddim_nfe, "sw2_integer": a, "sw2_shifted": b, "ratio": b / a})
    res = ExperimentResult("shifted_ddim", rows)
    med_ratio = _median([r["ratio"] for r in rows])
    res.rows.append({"seed": "median", "nfe": cfg.ddim_nfe, "ratio": med_ratio})
    res.checks["sw2_shifted <= 1.5 * sw2_integer"] = med_ratio <= 1.5
    return res


# -- terminal SNR ----------------------------------------------------------------


def _terminal_snr(cfg: ExperimentConfig, base_seed: int, out_dir: Path) -> ExperimentResult:
    s = cfg.schedule()
    dm_snr = s.snr_at(s.T)
    ft_T = bridge.t_dm_to_fm(s, s.T)
    # FM interpolant at t=0 is pure noise: signal coefficient 0
    fm_snr = 0.0**2 / 1.0**2
    row = {"dm_terminal_snr": dm_snr, "fm_start_snr": fm_snr, "alpha_T": float(s.alpha[-1]),
           "sigma_T": float(s.sigma[-1]), "f_t(T)": ft_T, "f_t_inv(0)": bridge.t_fm_to_dm(s, 0.0)}
    res = ExperimentResult("terminal_snr", [row])
    res.checks["dm terminal SNR > 0"] = dm_snr > 0.0
    res.checks["fm start SNR == 0"] = fm_snr == 0.0
    return res


# -- driver ----------------------------------------------------------------------


def write_result(res: ExperimentResult, out_dir: Path) -> None:
    columns: list[str] = []
    for row in res.rows:
        columns += [k for k in row if k not in columns]
    lines = [f"experiment: {res.name}", render_table(res.rows, columns), ""]
    for label, ok in res.checks.items():
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {label}")
    for label, ok in res.soft_checks.items():
        lines.append(f"[{'ok' if ok else 'warn'}] (soft) {label}")
    res.summary = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(res.summary)
    with open(out_dir / "summary.jsonl", "w") as fh:
        for row in res.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.write(json.dumps({"checks": res.checks, "soft_checks": res.soft_checks}, sort_keys=True) + "\n")


def run_experiment(name: str, base_seed: int = 0, out_dir="runs", cfg: ExperimentConfig | None = None
                   ) -> ExperimentResult:
    """Run one named experiment and write its report files; see ``EXPERIMENTS``."""
    cfg = cfg or ExperimentConfig()
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    out = Path(out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    if name == "convergence_full":
        res = _convergence(cfg, base_seed, out, lora=False)
    elif name == "convergence_lora":
        res = _convergence(cfg, base_seed, out, lora=True)
    elif name == "reflow_fewstep":
        res = _reflow(cfg, base_seed, out)
    elif name == "shifted_ddim":
        res = _shifted_ddim(cfg, base_seed, out)
    else:
        res = _terminal_snr(cfg, base_seed, out)
    write_result(res, out)
    return res
