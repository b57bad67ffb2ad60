"""Quantile-gradient estimators and the plug-in gradient assembly.

Three estimators for the population quantile gradient dtau/dtheta:

* naive: the exact a.s. derivative of the empirical quantile, i.e. the
  score gradient of the single sample realizing the order statistic;
* eps-threshold: average score gradient over samples whose scores fall
  within a fixed eps of the estimated threshold;
* m-ranking: the eps-threshold estimator with eps chosen adaptively as the
  m-th smallest |score - tau| distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .conformal import ScoreKind, empirical_quantile, score_batch
from .loss import LossComponents, h_transform


@dataclass(frozen=True)
class Naive:
    def describe(self) -> str:
        return "naive"


@dataclass(frozen=True)
class EpsThreshold:
    epsilon: float

    def __post_init__(self) -> None:
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def describe(self) -> str:
        return f"eps_threshold({self.epsilon:g})"


@dataclass(frozen=True)
class MRanking:
    m: int

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")

    def describe(self) -> str:
        return f"m_ranking({self.m})"


EstimatorKind = Naive | EpsThreshold | MRanking


def parse_estimator(text: str) -> EstimatorKind:
    """Parse config spellings like "naive", "eps:0.35", "m_rank:6"."""
    raw = text.strip().lower()
    head, _, arg = raw.partition(":")
    head = head.strip()
    if head == "naive":
        if arg:
            raise ValueError("naive estimator takes no argument")
        return Naive()
    if head in ("eps", "eps_threshold"):
        if not arg:
            raise ValueError("eps_threshold needs an epsilon, e.g. eps:0.35")
        return EpsThreshold(float(arg))
    if head in ("m_rank", "m_ranking"):
        if not arg:
            raise ValueError("m_ranking needs a rank count, e.g. m_rank:6")
        return MRanking(int(arg))
    raise ValueError(f"unknown estimator {text!r}")


@dataclass(frozen=True)
class GradEstimate:
    """Estimated quantile gradient with selection diagnostics."""

    eta_hat: np.ndarray
    n_selected: int
    effective_epsilon: float
    tau_hat: float


def _batch_arrays(batch_cal) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch_cal, tuple) and len(batch_cal) == 2:
        xs, ys = batch_cal
        return (np.asarray(xs, dtype=np.float64),
                np.asarray(ys, dtype=np.int64))
    if len(batch_cal) == 0:
        return np.empty((0, 0)), np.empty(0, dtype=np.int64)
    xs = np.stack([np.asarray(ex.x, dtype=np.float64) for ex in batch_cal])
    ys = np.asarray([ex.y for ex in batch_cal], dtype=np.int64)
    return xs, ys


def _example_at(batch_cal, i: int) -> nn.Example:
    if isinstance(batch_cal, tuple) and len(batch_cal) == 2:
        xs, ys = batch_cal
        return nn.Example(np.asarray(xs[i], dtype=np.float64), int(ys[i]))
    return batch_cal[i]


def calibration_scores(model: nn.Model, batch_cal, kind: ScoreKind) -> np.ndarray:
    """True-label conformity score of every calibration sample."""
    xs, ys = _batch_arrays(batch_cal)
    if ys.size == 0:
        raise ValueError("calibration batch is empty")
    return score_batch(nn.forward_batch(model, xs), ys, kind)


def naive_quantile_grad(model: nn.Model, batch_cal, alpha: float,
                        kind: ScoreKind) -> GradEstimate:
    """Gradient of the empirical quantile: the rank sample's score gradient."""
    scores = calibration_scores(model, batch_cal, kind)
    tau_hat, rank_index = empirical_quantile(scores, alpha)
    eta = nn.score_grad(model, _example_at(batch_cal, rank_index), kind)
    return GradEstimate(eta, 1, 0.0, tau_hat)


def select_eps(scores: np.ndarray, tau_hat: float, epsilon: float) -> np.ndarray:
    """Indices with |score - tau_hat| <= epsilon, in ascending order."""
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    scores = np.asarray(scores, dtype=np.float64)
    return np.flatnonzero(np.abs(scores - tau_hat) <= epsilon)


def select_m_rank(scores: np.ndarray, tau_hat: float,
                  m: int) -> tuple[np.ndarray, float]:
    """Indices of the m smallest |score - tau_hat| distances and the m-th one.

    Distance ties break toward the lowest index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= m <= scores.size:
        raise ValueError(f"m must be in [1, {scores.size}], got {m}")
    dist = np.abs(scores - tau_hat)
    order = np.argsort(dist, kind="stable")
    selected = np.sort(order[:m])
    return selected, float(dist[order[m - 1]])


def eta_hat(model: nn.Model, batch_cal, selected, kind: ScoreKind) -> np.ndarray:
    """Mean score gradient over the selected samples; zero if none selected."""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        return np.zeros(model.param_count)
    total = np.zeros(model.param_count)
    for i in selected:
        total += nn.score_grad(model, _example_at(batch_cal, int(i)), kind)
    return total / selected.size


def plugin_gradient(comp: LossComponents, eta: GradEstimate,
                    reg: np.ndarray) -> np.ndarray:
    """Assemble h'(ell) * (dl/dtheta + dl/dtau * eta) + reg."""
    reg = np.asarray(reg, dtype=np.float64)
    if comp.dl_dtheta_bar.shape != eta.eta_hat.shape:
        raise ValueError(f"loss partial dim {comp.dl_dtheta_bar.shape} vs "
                         f"eta dim {eta.eta_hat.shape}")
    if reg.shape != comp.dl_dtheta_bar.shape:
        raise ValueError(f"regularizer dim {reg.shape} vs "
                         f"loss partial dim {comp.dl_dtheta_bar.shape}")
    _, h_prime = h_transform(comp.ell_bar)
    return h_prime * (comp.dl_dtheta_bar + comp.dl_dtau_bar * eta.eta_hat) + reg


def estimate(model: nn.Model, batch_cal, alpha: float, kind: ScoreKind,
             estimator: EstimatorKind) -> GradEstimate:
    """Dispatch to the configured estimator; tau_hat always comes from the
    order-statistic quantile of the calibration scores."""
    if isinstance(estimator, Naive):
        return naive_quantile_grad(model, batch_cal, alpha, kind)
    scores = calibration_scores(model, batch_cal, kind)
    tau_hat, _ = empirical_quantile(scores, alpha)
    if isinstance(estimator, EpsThreshold):
        selected = select_eps(scores, tau_hat, estimator.epsilon)
        effective = estimator.epsilon
    elif isinstance(estimator, MRanking):
        selected, effective = select_m_rank(scores, tau_hat, estimator.m)
    else:
        raise TypeError(f"unknown estimator {estimator!r}")
    eta = eta_hat(model, batch_cal, selected, kind)
    return GradEstimate(eta, int(selected.size), effective, tau_hat)
