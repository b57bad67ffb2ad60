"""Batch splitting, the plug-in training loop, Nesterov SGD, lr schedule.

The naive estimator and the variance-reduced ones share a single training
path: a step splits its batch, estimates tau and its gradient on the
calibration half, the loss partials on the prediction half, assembles the
plug-in gradient, and applies one Nesterov update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .conformal import (ConformalConfig, empirical_quantile,
                        metrics_from_mask, scores_all, sigmoid)
from .data import Dataset
from .estimators import (EstimatorKind, GradEstimate, MRanking,
                         estimate, plugin_gradient)
from .loss import LossComponents, cross_entropy_and_grad, h_transform, \
    loss_and_partials, reg_grad
from .rng import substream

HISTORY_HEADER = ("epoch,train_loss,test_loss,test_acc,avg_set_size,"
                  "coverage,mean_selected,grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int            # total batch 2n; halves of size n each
    epochs: int
    base_lr: float
    conformal: ConformalConfig
    estimator: EstimatorKind
    momentum: float = 0.9
    seed: int = 0
    base_loss_weight: float = 0.0   # optional cross-entropy hook, off by default

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError(f"batch_size must be even and >= 2, "
                             f"got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.base_lr > 0.0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.base_loss_weight < 0.0:
            raise ValueError("base_loss_weight must be >= 0")
        if isinstance(self.estimator, MRanking) and \
                self.estimator.m > self.batch_size // 2:
            raise ValueError(f"m={self.estimator.m} exceeds the calibration "
                             f"half-batch size {self.batch_size // 2}")


@dataclass(frozen=True)
class StepLog:
    """Per-step diagnostics, including everything needed to reassemble the
    plug-in gradient bitwise."""

    ell_bar: float
    tau_hat: float
    n_selected: int
    n_active: int
    grad: np.ndarray
    grad_norm: float
    h_prime: float
    components: LossComponents
    eta: GradEstimate
    reg: np.ndarray


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_acc: float
    avg_set_size: float
    coverage: float
    mean_selected: float
    grad_norm: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [HISTORY_HEADER]
        for r in self.records:
            lines.append(",".join([str(r.epoch)] + [
                _fmt(v) for v in (r.train_loss, r.test_loss, r.test_acc,
                                  r.avg_set_size, r.coverage,
                                  r.mean_selected, r.grad_norm)]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def split_batch(batch, rng: np.random.Generator):
    """Uniformly random equal-size partition into (B_cal, B_pred)."""
    if isinstance(batch, tuple) and len(batch) == 2:
        xs, ys = batch
        n = len(ys)
        if n % 2 != 0:
            raise ValueError(f"batch size must be even, got {n}")
        perm = rng.permutation(n)
        half = n // 2
        cal, pred = perm[:half], perm[half:]
        return (xs[cal], ys[cal]), (xs[pred], ys[pred])
    n = len(batch)
    if n % 2 != 0:
        raise ValueError(f"batch size must be even, got {n}")
    perm = rng.permutation(n)
    half = n // 2
    return ([batch[i] for i in perm[:half]],
            [batch[i] for i in perm[half:]])


def lr_at(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Multi-step schedule: x0.1 after 2/5, 3/5 and 4/5 of the epochs."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    milestones = (math.floor(2 * total_epochs / 5),
                  math.floor(3 * total_epochs / 5),
                  math.floor(4 * total_epochs / 5))
    passed = sum(epoch >= m for m in milestones)
    return base_lr * 0.1 ** passed


def nesterov_step(params: np.ndarray, velocity: np.ndarray, grad: np.ndarray,
                  lr: float, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """One Nesterov update: v' = mu v + g; params' = params - lr (g + mu v')."""
    params = np.asarray(params, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not params.shape == velocity.shape == grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, velocity "
                         f"{velocity.shape}, grad {grad.shape}")
    new_velocity = mu * velocity + grad
    new_params = params - lr * (grad + mu * new_velocity)
    return new_params, new_velocity


def train_step(model: nn.Model, velocity: np.ndarray, batch, cfg: TrainConfig,
               rng: np.random.Generator,
               lr: float | None = None) -> tuple[nn.Model, np.ndarray, StepLog]:
    """One plug-in gradient step on one batch."""
    n = len(batch[1]) if isinstance(batch, tuple) else len(batch)
    if n != cfg.batch_size:
        raise ValueError(f"batch has {n} examples, config says {cfg.batch_size}")
    conf = cfg.conformal
    b_cal, b_pred = split_batch(batch, rng)
    eta = estimate(model, b_cal, conf.alpha, conf.score_kind, cfg.estimator)
    comp = loss_and_partials(model, eta.tau_hat, b_pred, conf)
    reg = reg_grad(model, conf.reg_weight)
    grad = plugin_gradient(comp, eta, reg)
    if cfg.base_loss_weight > 0.0:
        _, ce_grad = cross_entropy_and_grad(model, b_pred)
        grad = grad + cfg.base_loss_weight * ce_grad
    step_lr = cfg.base_lr if lr is None else lr
    new_params, new_velocity = nesterov_step(model.params, velocity, grad,
                                             step_lr, cfg.momentum)
    _, h_prime = h_transform(comp.ell_bar)
    log = StepLog(
        ell_bar=comp.ell_bar,
        tau_hat=eta.tau_hat,
        n_selected=eta.n_selected,
        n_active=comp.n_active,
        grad=grad,
        grad_norm=float(np.linalg.norm(grad)),
        h_prime=h_prime,
        components=comp,
        eta=eta,
        reg=reg,
    )
    return model.with_params(new_params), new_velocity, log


def epoch_eval(model: nn.Model, cal_pool: Dataset, test_pool: Dataset,
               conf: ConformalConfig) -> tuple[float, float, float, float]:
    """Cheap end-of-epoch eval on a fixed held-out calibration/test pair.

    Returns (test_loss, test_acc, avg_set_size, coverage); test_loss is the
    transformed mean smooth size loss at the calibrated threshold.
    """
    cal_logits = nn.forward_batch(model, cal_pool.features)
    cal_scores = scores_all(cal_logits, conf.score_kind)[
        np.arange(len(cal_pool)), cal_pool.labels]
    tau_hat, _ = empirical_quantile(cal_scores, conf.alpha)

    test_logits = nn.forward_batch(model, test_pool.features)
    test_scores = scores_all(test_logits, conf.score_kind)
    members = test_scores >= tau_hat
    metrics = metrics_from_mask(members, test_pool.labels, test_pool.num_classes)
    acc = float((test_logits.argmax(axis=1) == test_pool.labels).mean())

    smooth = sigmoid((test_scores - tau_hat) / conf.temperature)
    sizes = smooth.sum(axis=1)
    ell = float(np.maximum(0.0, sizes - conf.target_size).mean())
    test_loss, _ = h_transform(ell)
    return test_loss, acc, metrics.avg_size, metrics.coverage


def train(model: nn.Model, train_set: Dataset,
          test_sets: tuple[Dataset, Dataset],
          cfg: TrainConfig) -> tuple[nn.Model, TrainHistory]:
    """Epoch-shuffled minibatch training; deterministic given the seed.

    test_sets is the fixed (calibration pool, test pool) pair used for the
    end-of-epoch evaluation appended to the history.
    """
    if len(train_set) < cfg.batch_size:
        raise ValueError(f"dataset of {len(train_set)} examples is smaller "
                         f"than one batch of {cfg.batch_size}")
    cal_pool, test_pool = test_sets
    shuffle_rng = substream(cfg.seed, "train/shuffle")
    split_rng = substream(cfg.seed, "train/split")
    velocity = np.zeros(model.param_count)
    history = TrainHistory()
    steps_per_epoch = len(train_set) // cfg.batch_size
    feats, labels = train_set.arrays()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.base_lr)
        perm = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        sel_sum = 0.0
        norm_sum = 0.0
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = (feats[idx], labels[idx])
            model, velocity, log = train_step(model, velocity, batch, cfg,
                                              split_rng, lr)
            h_value, _ = h_transform(log.ell_bar)
            loss_sum += h_value
            sel_sum += log.n_selected
            norm_sum += log.grad_norm
        test_loss, acc, avg_size, coverage = epoch_eval(
            model, cal_pool, test_pool, cfg.conformal)
        history.records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / steps_per_epoch,
            test_loss=test_loss,
            test_acc=acc,
            avg_set_size=avg_size,
            coverage=coverage,
            mean_selected=sel_sum / steps_per_epoch,
            grad_norm=norm_sum / steps_per_epoch,
        ))
    return model, history
