"""Command-line entry point: ``d2f <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from diff2flow.bridge import bridge_table
from diff2flow.evalbench.datasets import KINDS, make_dataset
from diff2flow.evalbench.experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from diff2flow.evalbench.metrics import distance_report
from diff2flow.net import ToyModel
from diff2flow.reflow import DEFAULT_GEN_STEPS, PairSet, generate_pairs, rectify
from diff2flow.sample import MODES, SampleRun, sample
from diff2flow.schedule import make_linear_vp_schedule
from diff2flow.train import REGIMES, TrainConfig, run_training, save_run

log = logging.getLogger("d2f")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must be a key-value mapping")
    known = {f.name for f in dataclasses.fields(TrainConfig)} | {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise SystemExit(f"unknown config keys in {path}: {sorted(unknown)}")
    return data


def _pick(cls, mapping: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in mapping.items() if k in names}


def train_config(args, **fixed) -> TrainConfig:
    values = _pick(TrainConfig, load_config(args.config))
    overrides = {
        "seed": args.seed,
        "dataset": getattr(args, "dataset", None),
        "steps": getattr(args, "steps", None),
        "regime": getattr(args, "regime", None),
        "lora_rank": getattr(args, "lora_rank", None),
        "lora_fraction": getattr(args, "lora_fraction", None),
        "param": getattr(args, "param", None),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    values.update(fixed)
    return TrainConfig.from_mapping(values)


def write_rows(path: str, rows: np.ndarray) -> None:
    if path == "-":
        np.savetxt(sys.stdout, rows, delimiter=",", fmt="%.17g")
    else:
        np.savetxt(path, rows, delimiter=",", fmt="%.17g")


def cmd_pretrain(args) -> int:
    cfg = train_config(args, regime="diffusion_pretrain")
    data = make_dataset(cfg.dataset, cfg.n_data, seed=cfg.seed + 1)
    model, trace = run_training(cfg, data)
    out = save_run(args.out, model, trace)
    print(f"wrote {out / 'model.d2f'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = train_config(args)
    if cfg.regime == "diffusion_pretrain":
        raise SystemExit("finetune needs --regime diffusion_finetune|naive_fm|diff2flow")
    init = ToyModel.load(args.init)
    data = make_dataset(cfg.dataset, cfg.n_data, seed=cfg.seed + 5_000)
    model, trace = run_training(cfg, data, init=init)
    if args.merge and model.lora_attached:
        model.merge_lora()
    out = save_run(args.out, model, trace)
    print(f"wrote {out / 'model.d2f'}")
    return 0


def _schedule(args):
    cfg = _pick(TrainConfig, load_config(args.config))
    return make_linear_vp_schedule(cfg.get("T", 1000), cfg.get("beta_min", 1e-4), cfg.get("beta_max", 0.02))


def cmd_sample(args) -> int:
    model = ToyModel.load(args.checkpoint)
    s = _schedule(args)
    run = SampleRun(n_steps=args.nfe, n_samples=args.n, seed=args.seed, mode=args.mode, shift=args.shift,
                    record_trajectory=bool(args.trajectory))
    result = sample(model, s, run)
    samples, traj = result if run.record_trajectory else (result, None)
    write_rows(args.out, samples)
    if traj is not None:
        tdir = Path(args.trajectory)
        tdir.mkdir(parents=True, exist_ok=True)
        for i in range(traj.states.shape[1]):
            np.savetxt(tdir / f"probe_{i:05d}.csv", np.column_stack([traj.times, traj.states[:, i, :]]),
                       delimiter=",", fmt="%.17g")
    return 0


def cmd_gen_pairs(args) -> int:
    model = ToyModel.load(args.checkpoint)
    pairs = generate_pairs(model, _schedule(args), args.n_pairs, args.nfe, args.seed)
    pairs.save(args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_reflow_train(args) -> int:
    model = ToyModel.load(args.checkpoint)
    pairs = PairSet.load(args.pairs)
    cfg = train_config(args, regime="diff2flow")
    model, trace = rectify(model, pairs, cfg)
    out = save_run(args.out, model, trace)
    print(f"wrote {out / 'model.d2f'}")
    return 0


def cmd_eval(args) -> int:
    if args.samples:
        samples = np.loadtxt(args.samples, delimiter=",", ndmin=2)
        data = make_dataset(args.dataset or "two_moons", args.n_eval, seed=args.seed + 10_000)
        print(dataclasses.asdict(distance_report(samples, data)))
        return 0
    values = _pick(ExperimentConfig, load_config(args.config))
    if args.dataset:
        values["dataset"] = args.dataset
    if args.steps is not None:
        values["finetune_steps"] = args.steps
    if args.nfe is not None:
        values["nfe"] = args.nfe
    if args.shift is not None:
        values["shift"] = args.shift
    if args.lora_fraction is not None:
        values["lora_fraction"] = args.lora_fraction
    if args.regime:
        values["regimes"] = (args.regime,)
    if args.cache_dir:
        values["cache_dir"] = args.cache_dir
    cfg = ExperimentConfig.from_mapping(values)
    names = EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    ok = True
    for name in names:
        res = run_experiment(name, args.seed, args.out, cfg)
        print(res.summary)
        ok = ok and res.passed
    return 0 if ok else 1


def cmd_bridge_table(args) -> int:
    write_rows(args.out, bridge_table(_schedule(args), args.stride))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2f", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="YAML key-value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default)

    def lora(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--lora-rank", type=int)
        g.add_argument("--lora-fraction", type=float)

    p = sub.add_parser("pretrain", help="train a diffusion prior")
    common(p, "runs/pretrain")
    p.add_argument("--dataset", choices=KINDS)
    p.add_argument("--steps", type=int)
    p.add_argument("--param", choices=("epsilon", "v"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a prior under one regime")
    common(p, "runs/finetune")
    p.add_argument("--init", required=True, help="prior checkpoint")
    p.add_argument("--regime", choices=REGIMES[1:], default="diff2flow")
    p.add_argument("--dataset", choices=KINDS)
    p.add_argument("--steps", type=int)
    p.add_argument("--merge", action="store_true", help="fold LoRA adapters into the weights before saving")
    lora(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p, "-")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", type=int, default=32)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mode", choices=MODES, default="diff2flow_euler")
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--trajectory", help="directory for per-probe (t, x...) rows")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reflow", help="rectification")
    rsub = p.add_subparsers(dest="reflow_command", required=True)
    q = rsub.add_parser("gen-pairs", help="generate (noise, sample) couplings")
    common(q, "pairs.d2fp")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--n-pairs", type=int, default=20_000)
    q.add_argument("--nfe", type=int, default=DEFAULT_GEN_STEPS)
    q.set_defaults(func=cmd_gen_pairs)
    q = rsub.add_parser("train", help="1-rectification on stored pairs")
    common(q, "runs/reflow")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--pairs", required=True)
    q.add_argument("--steps", type=int)
    lora(q)
    q.set_defaults(func=cmd_reflow_train)

    p = sub.add_parser("eval", help="run a paired experiment or score a sample file")
    common(p, "runs")
    p.add_argument("--experiment", choices=(*EXPERIMENTS, "all"), default="all")
    p.add_argument("--samples", help="CSV of samples to score against --dataset instead")
    p.add_argument("--n-eval", type=int, default=2000)
    p.add_argument("--dataset", choices=KINDS)
    p.add_argument("--regime", choices=REGIMES[1:], help="restrict convergence runs to one regime")
    p.add_argument("--steps", type=int, help="finetune steps")
    p.add_argument("--nfe", type=int)
    p.add_argument("--shift", type=float)
    p.add_argument("--lora-fraction", type=float)
    p.add_argument("--cache-dir", help="reuse pretrained priors across runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bridge-table", help="dump (t_dm, t_fm, scale) rows")
    common(p, "-")
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_bridge_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
