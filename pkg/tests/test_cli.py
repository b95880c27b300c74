"""
Tests for the command line entry point
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from adapter import SuperLoraConfig, count_params, load_adapter, materialize_deltas
from grouping import bundled_manifest_path, load_manifest
from main import SWEEP_COLUMNS, main
from tensor_core import write_sltf


@pytest.fixture
def cli(config_dir):
    runtime = os.path.join(config_dir, 'superlora.json')

    def run(*args):
        return main(['--runtime-config', runtime, *args])
    return run


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_sweep_vit_lora_counts(cli, config_dir, tmp_path):
    out = str(tmp_path / "vit.csv")
    assert cli('sweep', '--manifest', 'vit_base_qv', '--grid',
               os.path.join(config_dir, 'grids', 'vit_lora.json'), '--out', out) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == SWEEP_COLUMNS
    assert table["params"].tolist() == [36864, 294912]
    assert set(table["variant"]) == {"LoRA"}
    assert os.path.exists(out + ".rejected.csv")


def test_sweep_rows_agree_with_count_params(cli, config_dir, tmp_path):
    out = str(tmp_path / "unet.csv")
    assert cli('sweep', '--manifest', 'unet_qv', '--grid',
               os.path.join(config_dir, 'grids', 'unet_variants.json'), '--out', out) == 0
    table = pd.read_csv(out)
    assert table["params"].is_monotonic_increasing
    dense = table[table["variant"] == "dense FT"]
    assert 565248 in dense["params"].tolist()
    manifest = load_manifest(bundled_manifest_path("unet_qv"))
    for row in table.head(5).itertuples():
        config = SuperLoraConfig(group_mode=row.group_mode, order=int(row.M), splits=int(row.K),
                                 rank=int(row.r), core=row.core, reshape=bool(row.reshape),
                                 projection=row.projection,
                                 groups=None if row.group_mode == "weight-wise" else int(row.G))
        assert count_params(config, manifest) == row.params
    rejected = pd.read_csv(out + ".rejected.csv")
    assert list(rejected.columns) == ["config", "reason"]
    assert len(rejected) > 0


def test_sweep_with_small_budget_finds_sub_100_configs(cli, config_dir, tmp_path):
    out = str(tmp_path / "budget.csv")
    assert cli('sweep', '--manifest', 'unet_qv', '--grid',
               os.path.join(config_dir, 'grids', 'lorta_budget.json'), '--out', out) == 0
    table = pd.read_csv(out)
    assert len(table) >= 1
    assert table["params"].max() <= 100


def test_sweep_with_no_feasible_point_exits_3(cli, config_dir, tmp_path):
    out = str(tmp_path / "none.csv")
    code = cli('sweep', '--manifest', 'vit_base_qv', '--grid',
               os.path.join(config_dir, 'grids', 'vit_lora.json'), '--out', out, '--budget', '0:10')
    assert code == 3


def test_materialize_writes_loadable_adapter(cli, config_dir, tmp_path, capsys):
    out = str(tmp_path / "lora.slad")
    assert cli('materialize', '--config', os.path.join(config_dir, 'adapters', 'lora_r8.json'),
               '--manifest', 'vit_base_qv', '--seed', '3', '--out', out) == 0
    summary = last_json(capsys)
    assert summary["variant"] == "LoRA"
    assert summary["params"] == 294912
    assert summary["groups"] == 24
    state = load_adapter(out)
    assert state.param_count() == 294912
    assert not any(np.any(d) for d in materialize_deltas(state).values())


def test_invalid_config_exits_2(cli, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"order": 2, "dropout": 0.1}))
    assert cli('materialize', '--config', str(bad), '--manifest', 'unet_qv', '--out',
               str(tmp_path / "x.slad")) == 2


def test_infeasible_config_exits_3(cli, tmp_path):
    manifest = tmp_path / "prime.json"
    manifest.write_text(json.dumps([{"name": "p", "shape": [7, 7]}]))
    config = tmp_path / "lokr.json"
    config.write_text(json.dumps({"group_mode": "weight-wise", "order": 2, "splits": 2}))
    assert cli('materialize', '--config', str(config), '--manifest', str(manifest), '--out',
               str(tmp_path / "x.slad")) == 3


def test_analyze_reports_geometry(cli, tmp_path, capsys, rng):
    w = rng.standard_normal((12, 10))
    write_sltf(str(tmp_path / "a.sltf"), w)
    write_sltf(str(tmp_path / "z.sltf"), np.zeros_like(w))
    assert cli('analyze', '--a', str(tmp_path / "a.sltf"), '--b', str(tmp_path / "a.sltf"), '--k', '3') == 0
    report = last_json(capsys)
    assert report["d_left"] == pytest.approx(1.0, abs=1e-8)
    assert report["d_right"] == pytest.approx(1.0, abs=1e-8)
    assert report["d_euclid"] == 0.0
    assert cli('analyze', '--a', str(tmp_path / "a.sltf"), '--b', str(tmp_path / "z.sltf"), '--k', '1') == 0
    assert last_json(capsys)["d_euclid"] == pytest.approx(1.0)
    assert cli('analyze', '--a', str(tmp_path / "a.sltf"), '--b', str(tmp_path / "a.sltf"), '--k', '11') == 2


def test_train_toy_is_reproducible(cli, config_dir, tmp_path, capsys):
    settings = tmp_path / "train.json"
    settings.write_text(json.dumps({
        "train": {"steps": 6, "batch_size": 16, "learning_rate": 0.0, "eval_interval": 3},
        "task": {"train_samples": 64, "eval_samples": 32},
    }))
    config = os.path.join(config_dir, 'adapters', 'lora_r2.json')
    metrics = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        assert cli('train-toy', '--config', config, '--train', str(settings), '--seed', '5',
                   '--out', str(out)) == 0
        summary = last_json(capsys)
        assert summary["initial_loss"] == summary["final_loss"]
        assert (out / "adapter.slad").exists()
        metrics.append((out / "metrics.jsonl").read_bytes())
    assert metrics[0] == metrics[1]


def test_train_toy_shipped_lora_config_converges(cli, config_dir, tmp_path, capsys):
    out = tmp_path / "toy"
    assert cli('train-toy', '--config', os.path.join(config_dir, 'adapters', 'lora_r2.json'),
               '--train', os.path.join(config_dir, 'train_toy.json'), '--seed', '0',
               '--out', str(out)) == 0
    summary = last_json(capsys)
    assert summary["variant"] == "LoRA"
    assert summary["final_loss"] < 0.5 * summary["initial_loss"]
    assert 0.0 <= summary["final_eval_acc"] <= 1.0
    assert 0.0 <= summary["source_train_acc"] <= 1.0
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 500
    assert all(np.isfinite(r["loss"]) for r in records)


def test_materialize_rho_shrinks_factor_target(cli, tmp_path, capsys):
    base = {"group_mode": "group-wise", "groups": 1, "order": 2, "rank": 4, "reshape": True,
            "projection": "linear"}
    summaries = {}
    for rho in (0.1, 1.0):
        config = tmp_path / f"rho{rho}.json"
        config.write_text(json.dumps(dict(base, rho=rho)))
        assert cli('materialize', '--config', str(config), '--manifest', 'unet_qv', '--seed', '1',
                   '--out', str(tmp_path / f"rho{rho}.slad")) == 0
        summaries[rho] = last_json(capsys)
    small = int(np.prod(summaries[0.1]["per_group_dims"][0]))
    full = int(np.prod(summaries[1.0]["per_group_dims"][0]))
    assert 56525 <= small < 2 * 56525
    assert 565248 <= full < 2 * 565248
    assert 5 < full / small < 20
    assert summaries[0.1]["params"] < summaries[1.0]["params"]
