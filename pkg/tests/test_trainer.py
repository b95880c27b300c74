"""
Tests for the toy model, reverse-mode gradients and SGD training
"""

import json
import logging

import numpy as np
import pytest

from adapter import SuperLoraConfig, count_params, init_adapter
from errors import InvalidInputError, NumericalError
from trainer import (Batch, SyntheticTask, ToyModel, TrainConfig, evaluate, gradient_check,
                     loss_and_grads, train)


TASK = {"seq_len": 8, "vocab": 32, "train_samples": 512, "eval_samples": 256,
        "shift_rank": 1, "shift_scale": 2.0}
MODEL = {"layers": 2, "width": 16, "classes": 4, "ffn_width": 32, "head_scale": 3.0}


def small_model(seed=0):
    return ToyModel(layers=2, width=8, classes=4, vocab=16, seq_len=4, ffn_width=16, head_scale=2.0, seed=seed)


def small_batch(model, size=6, seed=1):
    rng = np.random.Generator(np.random.Philox(seed))
    return Batch(rng.integers(0, model.vocab, size=(size, model.seq_len)),
                 rng.integers(0, model.classes, size=size))


def gradient_matrix():
    cases = []
    for core in ("identity", "diagonal", "full"):
        for projection in ("identity", "shuffle", "linear", "nonlinear"):
            for order, splits in ((2, 1), (2, 2), (2, 3), (3, 1)):
                cases.append((core, projection, order, splits))
    return cases


def test_zero_deltas_reproduce_base_loss():
    model = small_model()
    batch = small_batch(model)
    base, _ = model.forward(None, batch)
    zeros = {name: np.zeros(shape) for name, shape in model.adaptation_manifest().entries}
    adapted, _ = model.forward(zeros, batch)
    assert adapted == base
    assert np.isfinite(base) and base > 0


def test_batch_order_does_not_change_loss():
    model = small_model()
    batch = small_batch(model, size=8)
    order = np.array([3, 0, 7, 1, 6, 2, 5, 4])
    a, _ = model.forward(None, batch)
    b, _ = model.forward(None, batch.subset(order))
    assert a == pytest.approx(b, abs=1e-12)


def test_model_backward_matches_finite_differences(rng):
    model = small_model()
    batch = small_batch(model)
    deltas = {name: 0.1 * rng.standard_normal(shape) for name, shape in model.adaptation_manifest().entries}
    _, cache = model.forward(deltas, batch)
    grads = model.backward(cache)
    eps = 1e-6
    for name in ("layer0.attn.q", "layer1.attn.v"):
        for (i, j) in ((0, 0), (3, 5), (7, 2)):
            deltas[name][i, j] += eps
            plus, _ = model.forward(deltas, batch)
            deltas[name][i, j] -= 2 * eps
            minus, _ = model.forward(deltas, batch)
            deltas[name][i, j] += eps
            assert grads[name][i, j] == pytest.approx((plus - minus) / (2 * eps), abs=1e-7)


@pytest.mark.parametrize("core,projection,order,splits", gradient_matrix())
def test_gradients_match_central_differences(core, projection, order, splits):
    model = small_model()
    batch = small_batch(model)
    rho = 1.0 if projection in ("identity", "shuffle") else 0.5
    config = SuperLoraConfig(groups=1, group_mode="group-wise", order=order, splits=splits, rank=2,
                             core=core, reshape=True, projection=projection, projection_seed=3,
                             rho=rho, alpha=2.0, init_scheme="normal")
    state = init_adapter(config, model.adaptation_manifest(), 11)
    assert gradient_check(state, model, batch, eps=1e-5) < 1e-6


def test_gradient_check_on_weight_wise_kronecker_with_dense_block():
    model = small_model()
    config = SuperLoraConfig(group_mode="weight-wise", order=2, splits=2, rank=1, dense_split_dim=2,
                             init_scheme="normal")
    state = init_adapter(config, model.adaptation_manifest(), 4)
    assert gradient_check(state, model, small_batch(model)) < 1e-6


def test_zero_plane_receives_the_only_gradient():
    model = small_model()
    config = SuperLoraConfig(group_mode="weight-wise", order=2, rank=1, alpha=1.0)
    state = init_adapter(config, model.adaptation_manifest(), 2)
    _, grads = loss_and_grads(state, model, small_batch(model))
    for k in range(0, len(grads), 2):
        assert not np.any(grads[k])
        assert np.any(grads[k + 1])
    assert [g.shape for g in grads] == [a.shape for a in state.trainable_arrays()]


def make_run(config, steps, learning_rate, seed=0, eval_interval=25):
    model = ToyModel.from_settings(MODEL, TASK, seed)
    task = SyntheticTask.generate(model, TASK, seed + 1)
    state = init_adapter(config, model.adaptation_manifest(), seed + 2)
    train_config = TrainConfig(steps=steps, batch_size=32, learning_rate=learning_rate,
                               eval_interval=eval_interval, seed=seed)
    return model, task, state, train_config


def test_zero_learning_rate_gives_flat_trace_and_base_loss():
    config = SuperLoraConfig(group_mode="weight-wise", order=2, rank=2, alpha=2.0)
    model, task, state, train_config = make_run(config, steps=5, learning_rate=0.0)
    base, _ = model.forward(None, task.train)
    history = train(state, model, task, train_config)
    assert [r["loss"] for r in history] == [base] * 5
    assert history[0]["eval_acc"] is not None and history[1]["eval_acc"] is None


def test_training_keeps_model_frozen_and_is_deterministic(tmp_path):
    config = SuperLoraConfig(groups=1, group_mode="group-wise", order=3, rank=2, core="full", reshape=True,
                             projection="linear", rho=0.5, alpha=2.0)
    paths = []
    for run in range(2):
        model, task, state, train_config = make_run(config, steps=10, learning_rate=0.2)
        before = model.checksum()
        path = tmp_path / f"metrics{run}.jsonl"
        history = train(state, model, task, train_config, str(path))
        assert model.checksum() == before
        assert len(history) == 10
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    record = json.loads(paths[0].read_text().splitlines()[0])
    assert set(record) == {"step", "loss", "eval_acc"}


def test_divergence_reports_step():
    config = SuperLoraConfig(group_mode="weight-wise", order=2, rank=2, alpha=2.0, init_scheme="normal")
    model, task, state, train_config = make_run(config, steps=3, learning_rate=0.1)
    state.trainable_arrays()[0][...] = np.nan
    with pytest.raises(NumericalError) as info:
        train(state, model, task, train_config)
    assert info.value.step == 0


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(steps=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(InvalidInputError):
        TrainConfig.from_settings({"momentum": 0.9}, seed=0)


def test_desk_scale_transfer():
    lora = SuperLoraConfig(group_mode="weight-wise", order=2, rank=2, alpha=2.0)
    model, task, state, train_config = make_run(lora, steps=500, learning_rate=0.2, eval_interval=100)
    lora_history = train(state, model, task, train_config)
    assert lora_history[-1]["loss"] < 0.5 * lora_history[0]["loss"]

    manifest = model.adaptation_manifest()
    dense_params = manifest.total_elements
    assert count_params(lora, manifest) < dense_params

    grouped = SuperLoraConfig(groups=1, group_mode="group-wise", order=2, rank=3, reshape=True, alpha=3.0)
    assert count_params(grouped, manifest) < count_params(lora, manifest)
    model, task, state, train_config = make_run(grouped, steps=500, learning_rate=0.2, eval_interval=100)
    grouped_history = train(state, model, task, train_config)
    assert grouped_history[-1]["loss"] <= 1.1 * lora_history[-1]["loss"]
    _, accuracy = evaluate(state, model, task.eval)
    assert 0.0 <= accuracy <= 1.0


def test_source_and_target_labels_come_from_their_labelers():
    model = ToyModel.from_settings(MODEL, TASK, 0)
    task = SyntheticTask.generate(model, TASK, 1)
    assert model.accuracy(None, task.source_train) == 1.0
    assert model.accuracy(task.target_deltas, task.train) == 1.0
    assert model.accuracy(None, task.train) < 1.0


def test_periodic_gradient_checks_stay_within_tolerance(caplog):
    config = SuperLoraConfig(groups=1, group_mode="group-wise", order=2, splits=2, rank=2, reshape=True,
                             projection="linear", rho=0.5, alpha=2.0, init_scheme="normal")
    model, task, state, _ = make_run(config, steps=1, learning_rate=0.0)
    train_config = TrainConfig(steps=6, batch_size=16, learning_rate=0.1, grad_check_interval=2, seed=0)
    with caplog.at_level(logging.WARNING):
        train(state, model, task, train_config)
    assert not [r for r in caplog.records if "gradient check" in r.getMessage()]
