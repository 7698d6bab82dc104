import json

import numpy as np
import pytest

from diff2flow.evalbench.datasets import KINDS, ToyDataset, make_dataset
from diff2flow.evalbench.experiments import ExperimentConfig, render_table, run_experiment
from diff2flow.evalbench.metrics import distance_report, median_bandwidth, mmd_rbf, sliced_w2

SMALL = dict(n_seeds=2, n_data=2000, batch=64, pretrain_steps=40, finetune_steps=5, n_eval=200, nfe=4,
             reflow_pairs=128, reflow_gen_steps=4, reflow_steps=5, n_probe=8, n_t=4, ddim_nfe=4, log_every=5)


@pytest.mark.parametrize("kind", KINDS)
def test_datasets_are_deterministic_and_standardized(kind):
    a = make_dataset(kind, 20_000, seed=1)
    assert np.array_equal(a, make_dataset(ToyDataset(kind, 20_000, seed=1)))
    assert not np.array_equal(a, make_dataset(kind, 20_000, seed=2))
    assert np.all(np.abs(a.mean(axis=0)) < 3 / np.sqrt(len(a)) * a.std(axis=0) + 1e-2)
    assert np.allclose(a.std(axis=0), 1.0, atol=0.03)


def test_dataset_errors():
    with pytest.raises(ValueError):
        make_dataset("spirals", 10)
    with pytest.raises(ValueError):
        make_dataset("two_moons", 0)


def test_sliced_w2_basics():
    x = make_dataset("two_moons", 500, seed=0)
    assert sliced_w2(x, x) == 0.0
    assert sliced_w2(x, x[::-1]) == pytest.approx(0.0, abs=1e-28)  # BLAS rounding differs by row order
    delta = 0.7
    one_d = sliced_w2(np.zeros((10, 1)), np.full((10, 1), delta))
    assert one_d == pytest.approx(delta**2)
    rng = np.random.default_rng(0)
    cloud = rng.standard_normal((10_000, 2))
    shifted = cloud + np.array([delta, 0.0])
    assert sliced_w2(cloud, shifted, n_proj=128) == pytest.approx(delta**2 / 2, rel=0.1)
    assert sliced_w2(x[:100], x, n_proj=16) >= 0.0
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((0, 2)), x)
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((3, 3)), x)


def test_mmd_symmetric_and_zero_on_self():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((300, 2)), rng.standard_normal((200, 2)) + 1.0
    bw = median_bandwidth(a)
    assert mmd_rbf(a, a, bw) == 0.0
    assert mmd_rbf(a, b, bw) == pytest.approx(mmd_rbf(b, a, bw), abs=1e-15)
    assert mmd_rbf(a, b, bw) > mmd_rbf(a, rng.standard_normal((200, 2)), bw)
    rep = distance_report(a, b)
    assert rep.n_used == 200 and rep.projections == 128 and rep.bandwidth == median_bandwidth(b)


def test_render_table_alignment():
    text = render_table([{"a": 1, "b": 0.5}, {"a": "median", "b": 1e-9}], ["a", "b"])
    lines = text.splitlines()
    assert lines[0].startswith("a") and "1e-09" in lines[3]
    assert len({len(line.rstrip()) <= len(lines[1]) for line in lines}) == 1


def test_terminal_snr_experiment(tmp_path):
    res = run_experiment("terminal_snr", out_dir=tmp_path)
    row = res.rows[0]
    assert row["dm_terminal_snr"] > 0 and row["fm_start_snr"] == 0.0
    assert row["f_t_inv(0)"] == 1000.0
    assert res.passed
    assert (tmp_path / "terminal_snr" / "summary.txt").read_text() == res.summary


def test_unknown_experiment(tmp_path):
    with pytest.raises(ValueError):
        run_experiment("nope", out_dir=tmp_path)
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"bogus": 1})


def test_zero_step_convergence_shares_initialization(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "finetune_steps": 0}, cache_dir=str(tmp_path / "cache"))
    res = run_experiment("convergence_full", out_dir=tmp_path, cfg=cfg)
    runs = [r for r in res.rows if r["seed"] != "median"]
    assert len(runs) == 2 * len(cfg.regimes)
    assert len({r["init_digest"] for r in runs}) == 1
    assert len({r["init_eval"] for r in runs}) == 1
    d2f = {r["seed"]: r for r in runs if r["regime"] == "diff2flow"}
    # with no training, the diff2flow model is the prior sampled by the same sampler
    assert all(r["sliced_w2"] == r["init_eval"] for r in d2f.values())
    lines = (tmp_path / "convergence_full" / "summary.jsonl").read_text().splitlines()
    assert "checks" in json.loads(lines[-1])
    assert list((tmp_path / "cache").iterdir())


def test_reflow_and_ddim_experiments_run(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    res = run_experiment("reflow_fewstep", out_dir=tmp_path, cfg=cfg)
    assert {"straightness_before", "sw2_few_after"} <= set(res.rows[-1])
    assert (tmp_path / "reflow_fewstep" / "rectified_seed0" / "model.d2f").exists()
    res = run_experiment("shifted_ddim", out_dir=tmp_path, cfg=cfg)
    assert res.rows[-1]["seed"] == "median" and res.rows[-1]["ratio"] > 0
