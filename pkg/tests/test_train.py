import csv
import math

import numpy as np
import pytest

from sdehnn.autodiff import Tensor
from sdehnn.data import WindowedDataset, gen_synthetic, prepare_synthetic
from sdehnn.errors import ConfigError, DimensionError, TrainingError
from sdehnn.model import Architecture, SdeHnn
from sdehnn.sde import SdeConfig
from sdehnn.train import Adam, AdamConfig, TrainConfig, TrainingCurve, gaussian_nll, train


def dataset(x, y):
    x = np.asarray(x, dtype=float)
    idx = np.arange(len(y))
    return WindowedDataset(x.reshape(len(y), 1, -1), np.asarray(y, dtype=float), idx, idx)


def linear_data(n=64, seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, n)
    return dataset(x, 0.5 * x + 0.2 + 0.05 * r.standard_normal(n))


def tiny_model(seed=0):
    return SdeHnn(Architecture(input_dim=1, hidden=4), SdeConfig(1.0, 0.5), seed=seed)


# Adam

def test_adam_first_step_hand_value():
    p = Tensor([[1.0]])
    Adam({"p": p}, AdamConfig(lr=0.1, weight_decay=0.0)).step({"p": np.array([[1.0]])})
    assert abs(p.item() - (1 - 0.1 / (1 + 1e-8))) < 1e-15


def test_adam_zero_lr_keeps_parameters():
    p = Tensor([[1.0, -2.0]])
    Adam({"p": p}, AdamConfig(lr=0.0)).step({"p": np.array([[3.0, 4.0]])})
    assert np.array_equal(p.data, [[1.0, -2.0]])


def test_adam_weight_decay_is_coupled():
    # with zero loss gradient the decay term alone drives a normalized step of size lr
    p = Tensor([[2.0]])
    Adam({"p": p}, AdamConfig(lr=0.01, weight_decay=0.5)).step({})
    assert abs(p.item() - (2.0 - 0.01 / (1 + 1e-8))) < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        Adam({"p": Tensor([[1.0]])}).step({"p": np.ones((2, 1))})


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(beta1=1.0), dict(eps=0.0)])
def test_adam_config_rejects(kw):
    with pytest.raises(ConfigError):
        AdamConfig(**kw)


# curves and configs

def test_curve_epochs_increase(tmp_path):
    c = TrainingCurve()
    c.append(1, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        c.append(1, 1.0, 1.0, 0.1)
    c.append(2, 0.9, 0.8, 0.1)
    c.to_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["epoch", "train_nll", "val_nll", "val_cwce"] and len(rows) == 3


def test_train_config_rejects():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_gaussian_nll():
    assert gaussian_nll([1.0], [0.0], [1.0]) == 0.5
    assert abs(gaussian_nll([1.0], [0.0], [4.0]) - (1 / 8 + math.log(4) / 2)) < 1e-12


# training loop

def test_training_descends():
    data = linear_data()
    m = tiny_model()
    _, curve = train(m, data, linear_data(32, seed=1), TrainConfig(epochs=200, batch_size=16, patience=0))
    assert curve.train_nll[-1] < curve.train_nll[0]


def test_patience_zero_runs_all_epochs():
    _, curve = train(tiny_model(), linear_data(), linear_data(16, 1), TrainConfig(epochs=7, patience=0))
    assert len(curve) == 7 and curve.epochs == list(range(1, 8))


def test_early_stopping_and_best_snapshot():
    m = tiny_model()
    # lr large enough to overshoot so validation stops improving
    model, curve = train(m, linear_data(), linear_data(16, 1), TrainConfig(epochs=300, patience=3),
                         AdamConfig(lr=0.3))
    assert len(curve) < 300
    best = curve.best_epoch
    assert curve.val_nll[best - 1] == min(curve.val_nll)
    assert len(curve) - best == 3


def test_returned_model_is_best_snapshot():
    data, val = linear_data(), linear_data(16, 1)
    cfg = TrainConfig(epochs=40, patience=0, val_mc_samples=3)
    m, curve = train(tiny_model(), data, val, cfg, AdamConfig(lr=0.05))
    replay, _ = train(tiny_model(), data, val, TrainConfig(epochs=curve.best_epoch, patience=0,
                                                           val_mc_samples=3), AdamConfig(lr=0.05))
    for k, t in m.parameters().items():
        assert np.array_equal(t.data, replay.parameters()[k].data), k


def test_training_is_reproducible():
    cfg = TrainConfig(epochs=5, patience=0)
    a, ca = train(tiny_model(3), linear_data(), linear_data(16, 1), cfg)
    b, cb = train(tiny_model(3), linear_data(), linear_data(16, 1), cfg)
    assert ca.train_nll == cb.train_nll
    for k, t in a.parameters().items():
        assert np.array_equal(t.data, b.parameters()[k].data)


def test_nonfinite_loss_names_epoch_and_batch():
    data = dataset(np.linspace(-1, 1, 8), np.full(8, 1e200))
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        with np.errstate(all="ignore"):
            train(tiny_model(), data, data, TrainConfig(epochs=2, batch_size=4))


def test_empty_sets_rejected():
    data = linear_data()
    with pytest.raises(ConfigError):
        train(tiny_model(), data, data.subset(np.array([], dtype=int)))


@pytest.mark.slow
def test_toy_beats_constant_predictor():
    """Median over 5 seeds of the final validation NLL beats the best constant Gaussian."""
    ours, const = [], []
    for seed in range(5):
        prep = prepare_synthetic(gen_synthetic(1000, seed), seed=seed)
        m = SdeHnn(Architecture(input_dim=1), SdeConfig(3.0, 1.0), seed=seed)
        _, curve = train(m, prep.train, prep.val, TrainConfig(seed=seed))
        ours.append(curve.val_nll[-1])
        y = prep.val.targets
        const.append(gaussian_nll(y, np.full(y.size, prep.train.targets.mean()),
                                  np.full(y.size, prep.train.targets.var())))
    assert np.median(ours) < np.median(const)
