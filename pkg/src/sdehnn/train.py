"""Adam with L2 weight decay, mini-batch epochs and early stopping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .data import WindowedDataset
from .errors import ConfigError, DimensionError, NumericError, TrainingError
from .metrics import build_calibration_curve, cwce
from .model import SamplingConfig, SdeHnn, decompose_uncertainty, nll_loss, sample_predictions
from .sde import BrownianSource

log = logging.getLogger(__name__)

TRAIN_STREAM = 1
VAL_STREAM = 2
SHUFFLE_STREAM = 3


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0 and eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")


class Adam:
    """Bias-corrected Adam; weight decay is added to the gradient (g + wd * theta)."""

    def __init__(self, params: dict, cfg: AdamConfig = AdamConfig()):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        """``grads`` maps parameter names to arrays; missing names count as zero."""
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            elif g.shape != p.shape:
                raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def adam_step(state: Adam, params: dict, grads: dict) -> dict:
    state.params = params
    state.step(grads)
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    seed: int = 0
    patience: int = 50          # 0 disables early stopping
    val_mc_samples: int = 5
    grid: tuple = tuple(round(0.05 * k, 10) for k in range(1, 20))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.val_mc_samples < 1:
            raise ConfigError("val_mc_samples must be >= 1")


@dataclass
class TrainingCurve:
    epochs: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    val_cwce: list = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch: int, train_nll: float, val_nll: float, val_cwce: float) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("epochs must be strictly increasing")
        self.epochs.append(epoch)
        self.train_nll.append(train_nll)
        self.val_nll.append(val_nll)
        self.val_cwce.append(val_cwce)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_nll", "val_nll", "val_cwce"])
            for row in zip(self.epochs, self.train_nll, self.val_nll, self.val_cwce):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def gaussian_nll(y, mean, variance) -> float:
    """Per-sample average of (y - mu)^2 / (2 var) + log(var) / 2."""
    y, mean, variance = (np.asarray(a, dtype=np.float64).ravel() for a in (y, mean, variance))
    return float(np.mean(0.5 * (y - mean) ** 2 / variance + 0.5 * np.log(variance)))


def validate(model: SdeHnn, data: WindowedDataset, mc_samples: int, seed: int, grid) -> tuple[float, float]:
    """Validation NLL and CWCE from ``mc_samples`` passes (total variance when M >= 2)."""
    model.eval()
    samples = sample_predictions(model, model.encode(data.inputs),
                                 SamplingConfig(mc_samples, seed, stream=VAL_STREAM))
    if mc_samples >= 2:
        est = decompose_uncertainty(samples)
        mean, var = est.mean, est.total
    else:
        mean, var = samples.means[0], samples.variances[0]
    curve = build_calibration_curve(mean, var, data.targets, grid)
    return gaussian_nll(data.targets, mean, var), cwce(curve.levels, curve.coverages)


def train(model: SdeHnn, train_set: WindowedDataset, val_set: WindowedDataset,
          cfg: TrainConfig = TrainConfig(), adam: AdamConfig = AdamConfig()):
    """Minimize the batch-summed NLL; return the best-validation model and its curve."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    params = model.parameters()
    names = {id(t): k for k, t in params.items()}
    opt = Adam(params, adam)
    source = BrownianSource(cfg.seed, TRAIN_STREAM)
    curve = TrainingCurve()
    n = len(train_set)
    best, best_snap, since_best = math.inf, model.snapshot(), 0
    global_pass = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, SHUFFLE_STREAM, epoch]).permutation(n)
        model.train()
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    pred, _ = model.forward(model.encode(train_set.inputs[idx]), source, sample=global_pass)
                    loss = nll_loss(pred, train_set.targets[idx])
            except NumericError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            grads = backward(tape, loss)
            opt.step({names[id(t)]: g for t, g in grads.items() if id(t) in names})
            total += loss.item()
            global_pass += 1
        val_nll, val_cwce = validate(model, val_set, cfg.val_mc_samples, cfg.seed, cfg.grid)
        curve.append(epoch, total / n, val_nll, val_cwce)
        if val_nll < best:
            best, best_snap, since_best = val_nll, model.snapshot(), 0
            curve.best_epoch = epoch
        else:
            since_best += 1
        if epoch % 50 == 0:
            log.info("epoch %d train_nll %.4f val_nll %.4f val_cwce %.4f", epoch, total / n, val_nll, val_cwce)
        if cfg.patience and since_best >= cfg.patience:
            break
    model.restore(best_snap)
    model.eval()
    return model, curve
