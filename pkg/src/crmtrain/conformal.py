"""Conformity scores, empirical quantiles, threshold prediction sets, metrics.

Scores are "conformity" scores: larger means the label conforms better, and
the threshold predictor keeps every label scoring at least the calibrated
threshold. The empirical quantile follows the order-statistic convention
tau = E_(ceil(alpha*n)) on the calibration scores.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ScoreKind(enum.Enum):
    PROBABILITY = "probability"
    LOGIT = "logit"
    LOG_PROBABILITY = "log_probability"

    @classmethod
    def parse(cls, text: str) -> "ScoreKind":
        key = text.strip().lower()
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown score kind {text!r}; expected one of "
                         f"{[k.value for k in cls]}")


@dataclass(frozen=True)
class ConformalConfig:
    """Conformal training/evaluation knobs.

    alpha: miscoverage rate in (0, 1).
    temperature: sigmoid temperature of the smoothed set membership, > 0.
    target_size: hinge target for the size loss, >= 0.
    size_weight: scale of the size-loss term (gradient-neutral under the
        log transform; kept for config parity with the training recipes).
    reg_weight: L2 regularizer weight lambda >= 0.
    score_kind: which conformity score to use.
    """

    alpha: float
    temperature: float = 1.0
    target_size: int = 1
    size_weight: float = 1.0
    reg_weight: float = 0.0
    score_kind: ScoreKind = ScoreKind.LOG_PROBABILITY

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.target_size < 0:
            raise ValueError(f"target_size must be >= 0, got {self.target_size}")
        if self.size_weight < 0.0:
            raise ValueError(f"size_weight must be >= 0, got {self.size_weight}")
        if self.reg_weight < 0.0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")


@dataclass(frozen=True)
class PredictionSet:
    """Hard threshold set as a boolean membership mask over the K labels."""

    members: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", np.asarray(self.members, dtype=bool))

    def contains(self, y: int) -> bool:
        return bool(self.members[y])

    @property
    def size(self) -> int:
        return int(self.members.sum())


@dataclass(frozen=True)
class SmoothSet:
    """Sigmoid-relaxed set membership vector in [0, 1]^K."""

    memberships: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.memberships, dtype=np.float64)
        object.__setattr__(self, "memberships", m)

    @property
    def size(self) -> float:
        return float(self.memberships.sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_label(y: int, num_classes: int) -> int:
    y = int(y)
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} out of range for {num_classes} classes")
    return y


def score(logits: np.ndarray, y: int, kind: ScoreKind) -> float:
    """Conformity score of label y for one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_label(y, logits.shape[-1])
    if kind is ScoreKind.LOGIT:
        return float(logits[y])
    if kind is ScoreKind.PROBABILITY:
        return float(softmax(logits)[y])
    return float(log_softmax(logits)[y])


def scores_all(logits: np.ndarray, kind: ScoreKind) -> np.ndarray:
    """Scores of every label; works on one logit vector or a batch of rows."""
    logits = np.asarray(logits, dtype=np.float64)
    if kind is ScoreKind.LOGIT:
        return logits.copy()
    if kind is ScoreKind.PROBABILITY:
        return softmax(logits)
    return log_softmax(logits)


def score_batch(logits: np.ndarray, labels: np.ndarray, kind: ScoreKind) -> np.ndarray:
    """True-label score per row of a logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError("label out of range for logit matrix")
    return scores_all(logits, kind)[np.arange(logits.shape[0]), labels]


def score_logit_grad_weighted(logits: np.ndarray, weights: np.ndarray,
                              kind: ScoreKind) -> np.ndarray:
    """Logit-space gradient of sum_y weights_y * E_y for one logit vector.

    Composing this with the network's parameter VJP yields dE/dtheta terms
    without a separate backward pass per label.
    """
    w = np.asarray(weights, dtype=np.float64)
    if kind is ScoreKind.LOGIT:
        return w.copy()
    p = softmax(logits)
    if kind is ScoreKind.PROBABILITY:
        return p * w - (w @ p) * p
    return w - w.sum() * p


def score_logit_grad(logits: np.ndarray, y: int, kind: ScoreKind) -> np.ndarray:
    """Logit-space gradient of the single-label score E_y."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_label(y, logits.shape[-1])
    one_hot = np.zeros(logits.shape[-1])
    one_hot[y] = 1.0
    return score_logit_grad_weighted(logits, one_hot, kind)


def empirical_quantile(scores: np.ndarray, alpha: float) -> tuple[float, int]:
    """Order-statistic quantile tau = E_(ceil(alpha*n)) and who realizes it.

    Returns (tau, rank_index) where rank_index is the original index of the
    order statistic; among tied scores the lowest original index wins.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("empirical_quantile needs a nonempty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("empirical_quantile got a non-finite score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    # nextafter guards the ceil against float products like 0.07*100 = 7.000...1.
    k = int(np.ceil(np.nextafter(alpha * s.size, -np.inf)))
    k = min(max(k, 1), s.size)
    tau = float(np.partition(s, k - 1)[k - 1])
    rank_index = int(np.flatnonzero(s == tau)[0])
    return tau, rank_index


def thr_set(logits: np.ndarray, tau: float, kind: ScoreKind) -> PredictionSet:
    """Hard threshold set: labels whose score is >= tau."""
    if not np.isfinite(tau):
        raise ValueError(f"threshold must be finite, got {tau}")
    return PredictionSet(scores_all(logits, kind) >= tau)


def sigmoid(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def smooth_set(logits: np.ndarray, tau: float, config: ConformalConfig) -> SmoothSet:
    """Sigmoid-relaxed threshold set at temperature config.temperature."""
    s = scores_all(logits, config.score_kind)
    return SmoothSet(sigmoid((s - tau) / config.temperature))


@dataclass(frozen=True)
class SetMetrics:
    coverage: float
    avg_size: float
    per_class_coverage: np.ndarray
    per_class_size: np.ndarray


def metrics_from_mask(members: np.ndarray, labels: np.ndarray,
                      num_classes: int | None = None) -> SetMetrics:
    """Coverage / size metrics from an (N, K) boolean membership matrix."""
    members = np.asarray(members, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if members.ndim != 2 or members.shape[0] == 0:
        raise ValueError("metrics need a nonempty (N, K) membership matrix")
    if members.shape[0] != labels.shape[0]:
        raise ValueError(f"{members.shape[0]} sets vs {labels.shape[0]} labels")
    n, k = members.shape
    if num_classes is None:
        num_classes = k
    hits = members[np.arange(n), labels]
    sizes = members.sum(axis=1)
    per_cov = np.full(num_classes, np.nan)
    per_size = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            per_cov[c] = float(hits[mask].mean())
            per_size[c] = float(sizes[mask].mean())
    return SetMetrics(float(hits.mean()), float(sizes.mean()), per_cov, per_size)


def set_metrics(sets: list[PredictionSet], labels) -> SetMetrics:
    """Coverage / size metrics over a list of prediction sets."""
    if len(sets) == 0:
        raise ValueError("set_metrics needs at least one prediction set")
    members = np.stack([s.members for s in sets])
    return metrics_from_mask(members, np.asarray(labels))
