import copy

import numpy as np
import pytest
import torch

import importlib

import milexplain as mx

# the package re-exports the train() function under the same name as the
# module, so fetch the module object explicitly
trainmod = importlib.import_module("milexplain.train")
from milexplain.errors import ConfigurationError, DataError

from conftest import tiny_dataset


@pytest.fixture()
def tiny_splits():
    return mx.stratified_split(tiny_dataset(), (0.6, 0.2, 0.2))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        mx.TrainConfig(max_epochs=0).validate()
    with pytest.raises(ConfigurationError):
        mx.TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigurationError):
        mx.TrainConfig(patience_epochs=0).validate()
    with pytest.raises(ConfigurationError):
        mx.TrainConfig(optimizer="rmsprop").validate()
    with pytest.raises(ConfigurationError):
        mx.TrainConfig(nesterov_momentum=1.0).validate()


def test_early_stopper_crafted_schedule():
    # validation loss strictly increasing from epoch 1: best is epoch 1,
    # stop fires at epoch 6 (best + patience)
    stopper = mx.EarlyStopper(patience=5)
    stops = [stopper.update(e, 1.0 + 0.1 * e) for e in range(1, 10)]
    assert stops.index(True) + 1 == 6
    assert stopper.best_epoch == 1


def test_train_stops_at_best_plus_patience(tiny_model, tiny_splits, monkeypatch):
    tr, va, _ = tiny_splits
    snapshots = {}
    calls = {"n": 0}

    def fake_val_loss(model, val):
        calls["n"] += 1
        if calls["n"] == 1:
            snapshots["epoch1"] = copy.deepcopy(model.state_dict())
        return 1.0 + 0.1 * calls["n"]

    monkeypatch.setattr(trainmod, "validation_loss", fake_val_loss)
    cfg = mx.TrainConfig(max_epochs=50, patience_epochs=5)
    model, log = mx.train(tiny_model, tr, va, cfg)
    assert len(log) == 6
    for got, want in zip(model.state_dict().values(),
                         snapshots["epoch1"].values()):
        assert torch.equal(got, want)


def test_single_epoch(tiny_model, tiny_splits):
    tr, va, _ = tiny_splits
    _, log = mx.train(tiny_model, tr, va, mx.TrainConfig(max_epochs=1))
    assert len(log) == 1
    assert set(log[0]) == {"epoch", "train_loss", "val_loss", "timestamp"}


def test_train_deterministic(tiny_splits):
    tr, va, _ = tiny_splits
    logs, params = [], []
    for _ in range(2):
        torch.manual_seed(1)
        model = mx.MILModel(num_classes=3, embed_dim=16, attention_dim=8,
                            base_width=4)
        model, log = mx.train(model, tr, va, mx.TrainConfig(max_epochs=2))
        logs.append([{k: v for k, v in e.items() if k != "timestamp"}
                     for e in log])
        params.append([p.detach().clone() for p in model.parameters()])
    assert logs[0] == logs[1]
    assert all(torch.equal(a, b) for a, b in zip(*params))


def test_train_rejects_empty(tiny_model, tiny_splits):
    tr, _, _ = tiny_splits
    empty = mx.Dataset(bags=[], num_classes=3)
    with pytest.raises(DataError):
        mx.train(tiny_model, tr, empty, mx.TrainConfig(max_epochs=1))


def test_evaluate_report_consistency(tiny_model, tiny_splits):
    _, _, te = tiny_splits
    report = mx.evaluate(tiny_model, te)
    cm = report.confusion_matrix
    counts = np.bincount(te.labels(), minlength=3)
    assert np.array_equal(cm.sum(axis=1), counts)
    assert report.accuracy == pytest.approx(np.trace(cm) / len(te.bags))


def test_evaluate_empty(tiny_model):
    with pytest.raises(DataError):
        mx.evaluate(tiny_model, mx.Dataset(bags=[], num_classes=3))
