# tests/test_trainer.py

from __future__ import annotations

import csv

import numpy as np
import pytest

from attention_reid.backbone import BACKBONE_PREFIX, init_backbone_params
from attention_reid.checkpoint import load_checkpoint
from attention_reid.data import generate_synthetic_dataset
from attention_reid.errors import ConfigurationError, NumericalError, UsageError
from attention_reid.models import (
    AttentionConfig,
    BackboneConfig,
    BatchMode,
    DatasetConfig,
    LossConfig,
    OptimConfig,
    ScheduleConfig,
    TrainState,
)
from attention_reid.network import ReidNetwork
from attention_reid.trainer import CsvLog, Trainer, class_index, decays, lr_at, sgd_step


def _make_dataset(num_identities: int = 8, val: int = 2, test: int = 2):
    config = DatasetConfig(
        num_identities=num_identities,
        val_identities=val,
        test_identities=test,
        image_size=(8, 8),
        seed=1,
    )
    return generate_synthetic_dataset(config)


def _make_trainer(dataset, out_dir=None, **schedule):
    values = dict(
        batch_size=4,
        identities_per_batch=2,
        pretrain_batch_size=8,
        eval_every=2,
        eval_repeats=2,
        log_every=0,
        checkpoint_every=0,
        augment=False,
    )
    values.update(schedule)
    network = ReidNetwork(
        BackboneConfig.micro(),
        AttentionConfig(hidden_size=3, glimpses=3, steps=(2, 3)),
        num_classes=len(dataset.identities("train")),
    )
    return Trainer(network, LossConfig(), ScheduleConfig(**values), out_dir=out_dir)


def _optim(iters: int = 4, **overrides) -> OptimConfig:
    return OptimConfig(eta0=0.01, max_iters=iters, **overrides)


# ---------------------------------------------------------------------- #
# lr_at / sgd_step
# ---------------------------------------------------------------------- #


def test_lr_at_zero_is_eta0():
    config = OptimConfig(eta0=0.01)
    assert lr_at(0, config) == 0.01


def test_lr_after_ten_thousand_iterations():
    config = OptimConfig(eta0=0.01, gamma=1e-4, power=0.75)
    assert lr_at(10_000, config) == pytest.approx(0.01 * 2.0**-0.75, rel=1e-12)
    assert lr_at(10_000, config) == pytest.approx(0.005946, abs=1e-6)


@pytest.mark.parametrize("k", [0, 1, 1_000, 1_000_000])
def test_lr_matches_the_closed_form(k):
    config = OptimConfig(eta0=0.003, gamma=2e-4, power=0.5)
    assert lr_at(k, config) == 0.003 * (1.0 + 2e-4 * k) ** -0.5


def test_lr_is_strictly_decreasing():
    config = OptimConfig()
    ks = np.unique(np.logspace(0, 6, 400).astype(int))
    rates = [lr_at(int(k), config) for k in ks]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_lr_rejects_negative_iterations():
    with pytest.raises(UsageError):
        lr_at(-1, OptimConfig())


def test_weight_decay_only_touches_weights():
    assert decays("attn.gate_f.weight")
    assert not decays("attn.gate_f.bias")
    state = TrainState({"l.weight": np.ones(2), "l.bias": np.ones(2)})
    sgd_step(state, {}, OptimConfig(eta0=0.1, momentum=0.0, weight_decay=0.5))
    assert np.allclose(state.params["l.weight"], 0.95, atol=1e-15)
    assert state.params["l.bias"].tolist() == [1.0, 1.0]


def test_vanilla_sgd_limit():
    state = TrainState({"x.weight": np.array([1.0, -2.0])})
    sgd_step(state, {"x.weight": np.array([0.5, 0.5])}, OptimConfig(eta0=0.1, momentum=0.0, weight_decay=0.0))
    assert np.allclose(state.params["x.weight"], [0.95, -2.05], atol=1e-15)
    assert state.iteration == 1


def test_zero_gradient_is_a_fixed_point():
    state = TrainState({"x.weight": np.array([0.3])})
    sgd_step(state, {"x.weight": np.zeros(1)}, OptimConfig(weight_decay=0.0))
    assert state.params["x.weight"].tolist() == [0.3]


def test_two_momentum_steps_on_a_quadratic():
    config = OptimConfig(eta0=0.1, gamma=0.0, momentum=0.9, weight_decay=0.0)
    state = TrainState({"x.weight": np.array([1.0])})
    theta, v = 1.0, 0.0
    for _ in range(2):
        grad = state.params["x.weight"].copy()
        sgd_step(state, {"x.weight": grad}, config)
        v = 0.9 * v - 0.1 * theta
        theta = theta + v
        assert abs(state.params["x.weight"][0] - theta) <= 1e-15
    assert theta == pytest.approx(0.72, abs=1e-15)


def test_frozen_parameters_keep_value_and_momentum():
    state = TrainState({"backbone.c.weight": np.ones(2), "head.weight": np.ones(2)})
    state.velocity["backbone.c.weight"] += 0.25
    grads = {k: np.ones(2) for k in state.params}
    sgd_step(state, grads, OptimConfig(), trainable=lambda n: not n.startswith("backbone."))
    assert state.params["backbone.c.weight"].tolist() == [1.0, 1.0]
    assert state.velocity["backbone.c.weight"].tolist() == [0.25, 0.25]
    assert state.params["head.weight"][0] < 1.0


def test_non_finite_gradient_names_the_parameter():
    state = TrainState({"a.weight": np.ones(2), "b.weight": np.ones(2)})
    before = {k: v.copy() for k, v in state.params.items()}
    with pytest.raises(NumericalError, match="b.weight"):
        sgd_step(state, {"a.weight": np.ones(2), "b.weight": np.array([np.nan, 0.0])}, OptimConfig())
    assert all(np.array_equal(state.params[k], before[k]) for k in before)
    assert state.iteration == 0


def test_gradient_shape_mismatch():
    state = TrainState({"a.weight": np.ones(2)})
    with pytest.raises(ConfigurationError):
        sgd_step(state, {"a.weight": np.ones(3)}, OptimConfig())


def test_one_small_step_decreases_a_fixed_batch_loss():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, skip_pretrain=True)
    network = trainer.network
    rng = np.random.default_rng(0)
    params = network.init_params(rng)
    samples = dataset.train
    classes = class_index(samples)
    batch, labels, triples = trainer._next_batch(samples, classes, rng)

    def loss_at(p):
        s = TrainState({k: v.copy() for k, v in p.items()})
        return trainer._step(s, batch, labels, triples, OptimConfig(eta0=1e-12, weight_decay=0.0, momentum=0.0), lambda n: True).objective

    base = loss_at(params)
    decreased = False
    for eta in (1e-3, 1e-4, 1e-5):
        state = TrainState({k: v.copy() for k, v in params.items()})
        trainer._step(state, batch, labels, triples, OptimConfig(eta0=eta, momentum=0.0, weight_decay=0.0), lambda n: True)
        decreased |= loss_at(state.params) < base
    assert decreased


# ---------------------------------------------------------------------- #
# CsvLog
# ---------------------------------------------------------------------- #


def test_csv_log_without_a_path_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with CsvLog(None, ("iter",)).open() as log:
        log.write({"iter": 0})
    assert list(tmp_path.iterdir()) == []


def test_csv_log_resume_drops_later_rows(tmp_path):
    path = tmp_path / "log.csv"
    with CsvLog(path, ("iter", "loss")).open() as log:
        for k in range(5):
            log.write({"iter": k, "loss": k / 10})
    with CsvLog(path, ("iter", "loss")).open(resume_from=2) as log:
        log.write({"iter": 3, "loss": "x"})
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["iter"] for r in rows] == ["0", "1", "2", "3"]
    assert rows[-1]["loss"] == "x"


# ---------------------------------------------------------------------- #
# pretraining
# ---------------------------------------------------------------------- #


def test_pretraining_returns_only_backbone_parameters():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset)
    backbone = trainer.pretrain_backbone(dataset, _optim(3))
    assert backbone and all(k.startswith(BACKBONE_PREFIX) for k in backbone)
    assert len(trainer.pretrain_summary.losses) == 3
    assert 0.0 <= trainer.pretrain_summary.train_accuracy <= 1.0


def test_pretraining_is_deterministic():
    dataset = _make_dataset()
    a = _make_trainer(dataset)
    b = _make_trainer(dataset)
    pa = a.pretrain_backbone(dataset, _optim(3))
    pb = b.pretrain_backbone(dataset, _optim(3))
    assert a.pretrain_summary.losses == b.pretrain_summary.losses
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_single_identity_pretraining_has_zero_loss():
    dataset = _make_dataset(num_identities=3, val=1, test=1)
    trainer = _make_trainer(dataset)
    trainer.pretrain_backbone(dataset, _optim(2))
    assert trainer.pretrain_summary.losses == [0.0, 0.0]


def test_pretraining_writes_nothing_without_an_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    dataset = _make_dataset()
    _make_trainer(dataset).pretrain_backbone(dataset, _optim(1))
    assert list(tmp_path.iterdir()) == []


# ---------------------------------------------------------------------- #
# end-to-end training
# ---------------------------------------------------------------------- #


def test_end_to_end_needs_a_backbone_or_cold_start():
    dataset = _make_dataset()
    with pytest.raises(UsageError):
        _make_trainer(dataset).train_end_to_end(dataset, init=None, optim=_optim(1))


def test_class_count_must_match_the_train_split():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, skip_pretrain=True)
    trainer.network.num_classes += 1
    with pytest.raises(ConfigurationError):
        trainer.train_end_to_end(dataset, optim=_optim(1))


def test_cold_start_trains_and_validates():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, skip_pretrain=True)
    params = trainer.train_end_to_end(dataset, optim=_optim(4))
    trainer.network.check_params(params)
    assert [v.iteration for v in trainer.validation] == [2, 4]
    assert trainer.state.iteration == 4
    assert len(trainer.state.history) == 4
    assert 0.0 <= trainer.state.best_rank1 <= 1.0


def test_frozen_backbone_is_bitwise_unchanged():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, freeze_backbone=True)
    init = init_backbone_params(trainer.network.backbone, np.random.default_rng(5))
    params = trainer.train_end_to_end(dataset, init=init, optim=_optim(3))
    for name, value in init.items():
        assert np.array_equal(params[name], value)
        assert np.array_equal(trainer.state.params[name], value)


def test_label_shuffle_mode_trains():
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, skip_pretrain=True, batch_mode=BatchMode.LABEL_SHUFFLE)
    trainer.train_end_to_end(dataset, optim=_optim(3))
    assert trainer.state.iteration == 3


def test_training_files(tmp_path):
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, out_dir=tmp_path, skip_pretrain=True)
    trainer.train_end_to_end(dataset, optim=_optim(3))
    with (tmp_path / "train_log.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["iter"] for r in rows] == ["0", "1", "2"]
    assert rows[1]["val_rank1"] != "" and rows[0]["val_rank1"] == ""
    for row in rows:
        assert float(row["multi"]) == pytest.approx(float(row["trip"]) + float(row["iden"]), abs=1e-12)
    model = load_checkpoint(tmp_path / "model.ckpt")
    assert model.meta["regime"] == "end-to-end"
    trainer.network.check_params(model.params)


def test_resume_reproduces_an_uninterrupted_run(tmp_path):
    dataset = _make_dataset()
    straight = _make_trainer(dataset, skip_pretrain=True)
    expected = straight.train_end_to_end(dataset, optim=_optim(4))

    first = _make_trainer(dataset, out_dir=tmp_path, skip_pretrain=True)
    first.train_end_to_end(dataset, optim=_optim(2))
    second = _make_trainer(dataset, out_dir=tmp_path, skip_pretrain=True)
    resumed = second.train_end_to_end(dataset, optim=_optim(4), resume=tmp_path / "checkpoint.ckpt")

    assert second.state.iteration == 4
    for name, value in expected.items():
        assert np.array_equal(resumed[name], value)
    for name, value in straight.state.params.items():
        assert np.array_equal(second.state.params[name], value)


def test_checkpoint_round_trip_gives_identical_embeddings(tmp_path):
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, out_dir=tmp_path, skip_pretrain=True)
    params = trainer.train_end_to_end(dataset, optim=_optim(2))
    loaded = load_checkpoint(tmp_path / "model.ckpt").params
    images = [s.pixels for s in dataset.test]
    assert np.array_equal(trainer.network.embed(params, images), trainer.network.embed(loaded, images))


def test_non_finite_loss_aborts_with_last_good_state(tmp_path):
    dataset = _make_dataset()
    trainer = _make_trainer(dataset, out_dir=tmp_path)
    init = init_backbone_params(trainer.network.backbone, np.random.default_rng(0))
    first = sorted(init)[0]
    init[first] = np.full_like(init[first], np.nan)
    with pytest.raises(NumericalError):
        trainer.train_end_to_end(dataset, init=init, optim=_optim(2))
    assert (tmp_path / "last_good.ckpt").is_file()
    assert load_checkpoint(tmp_path / "last_good.ckpt").iteration == 0
