"""Acceptance criteria 1 to 10, each at its stated tolerance and runtime."""

import time

import numpy as np
import pytest

from conftest import finite_difference, rel_err
from diff2flow import bridge
from diff2flow.convert import velocity_from_diffusion
from diff2flow.evalbench.datasets import make_dataset
from diff2flow.evalbench.experiments import EXPERIMENTS, ExperimentConfig, get_prior, run_experiment
from diff2flow.net import TimeEmbedding, ToyModel
from diff2flow.schedule import make_linear_vp_schedule
from diff2flow.train import diff2flow_step, initial_fm_loss, step_rng

S = make_linear_vp_schedule()
NODES = np.arange(S.T + 1, dtype=np.float64)


@pytest.fixture(scope="session")
def prior_cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("priors"))


def test_c01_bridge_round_trips(criterion):
    with criterion(1, "bridge round trips") as note:
        start = time.perf_counter()
        t_back = bridge.t_fm_to_dm(S, bridge.t_dm_to_fm(S, NODES))
        node_err = np.max(np.abs(t_back - NODES))
        x = np.random.default_rng(0).standard_normal((S.T + 1, 2))
        x_fm = bridge.x_dm_to_fm(S, x, NODES)
        x_back, _ = bridge.x_fm_to_dm(S, x_fm, bridge.t_dm_to_fm(S, NODES))
        state_err = np.max(np.abs(x_back - x))
        t = np.random.default_rng(1).uniform(0, S.T, 10_000)
        cont_err = np.max(np.abs(bridge.t_fm_to_dm(S, bridge.t_dm_to_fm(S, t)) - t))
        seconds = time.perf_counter() - start
        note.append(f"node {node_err:.1e}, state {state_err:.1e}, continuous {cont_err:.1e}, {seconds:.3f}s")
        assert node_err < 1e-9 and state_err < 1e-9 and cont_err < 1e-6
        assert seconds < 1.0


def test_c02_interpolant_equivalence(criterion):
    with criterion(2, "interpolant equivalence") as note:
        start = time.perf_counter()
        rng = np.random.default_rng(2)
        data, noise = rng.standard_normal((2, 10_000, 2))
        t = rng.integers(0, S.T + 1, 10_000).astype(np.float64)
        a, s = S.coeffs_at(t)
        x_dm = a[:, None] * data + s[:, None] * noise
        tf = bridge.t_dm_to_fm(S, t)[:, None]
        err = np.max(np.abs(bridge.x_dm_to_fm(S, x_dm, t) - (tf * data + (1 - tf) * noise)))
        seconds = time.perf_counter() - start
        note.append(f"max err {err:.1e}, {seconds:.3f}s")
        assert err < 1e-9 and seconds < 1.0


def test_c03_objective_change_oracle(criterion):
    with criterion(3, "objective change oracle") as note:
        start = time.perf_counter()
        rng = np.random.default_rng(3)
        data, eps = rng.standard_normal((2, 1000, 2))
        worst = {}
        for param in ("epsilon", "v", "x0"):
            err = 0.0
            for t in NODES:
                a, s = S.coeffs_at(t)
                x_dm = a * data + s * eps
                pred = {"epsilon": eps, "v": a * eps - s * data, "x0": data}[param]
                if (param == "epsilon" and a == 0) or (param == "x0" and s == 0):
                    continue
                tf = bridge.t_dm_to_fm(S, t)
                v = velocity_from_diffusion(pred, bridge.x_dm_to_fm(S, x_dm, t), tf, S, param)
                err = max(err, np.max(np.abs(v - (data - eps))))
            worst[param] = err
        seconds = time.perf_counter() - start
        note.append(", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {seconds:.2f}s")
        assert max(worst.values()) < 1e-9 and seconds < 5.0


def test_c04_gradient_check(criterion):
    with criterion(4, "end-to-end gradient check") as note:
        start = time.perf_counter()
        m = ToyModel(hidden=(8, 8), embedding=TimeEmbedding(4), param="v", rng=np.random.default_rng(4))
        assert m.n_parameters() <= 500
        x1 = make_dataset("two_moons", 32, seed=4)
        _, grads = diff2flow_step(m, x1, S, step_rng(4, 0))
        fd = finite_difference(m, lambda: diff2flow_step(m, x1, S, step_rng(4, 0))[0])
        worst = max(float(np.max(rel_err(grads[k], fd[k]))) for k in grads)
        seconds = time.perf_counter() - start
        note.append(f"{m.n_parameters()} params, max rel err {worst:.1e}, {seconds:.2f}s")
        assert worst < 1e-4 and seconds < 30.0


def test_c05_lora_contracts(criterion):
    with criterion(5, "LoRA contracts") as note:
        rng = np.random.default_rng(5)
        base = ToyModel(rng=rng)
        x, t = rng.standard_normal((64, 2)), rng.uniform(0, 1000, 64)
        lora = base.clone().attach_lora(fraction=0.2, rng=rng)
        assert np.array_equal(lora(x, t), base(x, t))
        for layer in lora.layers:
            layer.B = rng.standard_normal(layer.B.shape)
        lora.mark_updated()
        out = lora(x, t)
        merge_err = float(np.max(np.abs(lora.clone().merge_lora()(x, t) - out)))
        assert merge_err < 1e-12
        out, cache = lora.forward(x, t, keep_cache=True)
        grads = lora.backward(np.ones_like(out), cache)
        assert set(grads) == set(lora.trainable_parameters())
        assert all(k.endswith((".A", ".B")) for k in grads)
        expected = sum(L.A.shape[0] * (L.shape[0] + L.shape[1]) for L in lora.layers)
        assert lora.n_parameters(trainable_only=True) == expected
        assert [L.A.shape[0] for L in lora.layers] == [14, 26, 26, 26, 1]
        note.append(f"merge err {merge_err:.1e}, {expected} trainable")


def test_c06_warm_start(criterion, prior_cache):
    with criterion(6, "warm-start inequality") as note:
        start = time.perf_counter()
        cfg = ExperimentConfig(cache_dir=prior_cache)
        prior = get_prior(cfg, "two_moons", 0)
        d2f, naive = [], []
        for seed in range(3):
            data = make_dataset("two_moons", cfg.n_data, seed=seed + 5_000)
            d2f.append(initial_fm_loss(prior, "diff2flow", data, S, seed, cfg.batch))
            naive.append(initial_fm_loss(prior, "naive_fm", data, S, seed, cfg.batch))
        seconds = time.perf_counter() - start
        note.append(f"median {np.median(d2f):.3f} vs {np.median(naive):.3f}, {seconds:.1f}s")
        assert np.median(d2f) < np.median(naive)
        assert seconds < 120.0


def _experiment(criterion, criterion_number, title, names, prior_cache, tmp_path, limit):
    with criterion(criterion_number, title) as note:
        start = time.perf_counter()
        cfg = ExperimentConfig(cache_dir=prior_cache)
        results = [run_experiment(name, 0, tmp_path, cfg) for name in names]
        seconds = time.perf_counter() - start
        for res in results:
            print(res.summary)
            note.append(f"{res.name} {'ok' if res.passed else 'failed'}")
        note.append(f"{seconds:.0f}s")
        assert all(res.passed for res in results)
        assert seconds < limit
    return results


def test_c07_convergence_ordering(criterion, prior_cache, tmp_path):
    _experiment(criterion, 7, "convergence ordering", ["convergence_full", "convergence_lora"], prior_cache, tmp_path, 600)


def test_c08_reflow(criterion, prior_cache, tmp_path):
    _experiment(criterion, 8, "reflow straightness and few-step quality", ["reflow_fewstep"], prior_cache, tmp_path, 600)


def test_c09_shifted_ddim(criterion, prior_cache, tmp_path):
    _experiment(criterion, 9, "shifted DDIM probe", ["shifted_ddim"], prior_cache, tmp_path, 120)


SMALL = dict(n_data=4000, batch=64, pretrain_steps=200, finetune_steps=50, n_eval=300, nfe=8, reflow_pairs=500,
             reflow_gen_steps=8, reflow_steps=50, n_probe=16, n_t=8, ddim_nfe=8, log_every=25)


def test_c10_determinism(criterion, prior_cache, tmp_path):
    with criterion(10, "determinism") as note:
        cfg = ExperimentConfig(**SMALL)
        for name in EXPERIMENTS:
            a = run_experiment(name, 0, tmp_path / "a", cfg)
            b = run_experiment(name, 0, tmp_path / "b", cfg)
            for fname in ("summary.txt", "summary.jsonl"):
                assert (tmp_path / "a" / name / fname).read_bytes() == (tmp_path / "b" / name / fname).read_bytes()
            assert a.summary == b.summary
        for ckpt in (tmp_path / "a").rglob("*.d2f"):
            assert (tmp_path / "b" / ckpt.relative_to(tmp_path / "a")).read_bytes() == ckpt.read_bytes()
            data = ckpt.read_bytes()
            assert ToyModel.from_bytes(data).to_bytes() == data
        note.append(f"{len(EXPERIMENTS)} experiments reproduced, checkpoints round trip")
