"""Smoothed size loss, its partials in theta and tau, transform, regularizer.

The per-example loss is the hinge max(0, smooth-set-size - kappa) at a fixed
threshold tau. Partials are reduced in index order over the batch so results
are bitwise reproducible; the hinge subgradient at size == kappa is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .conformal import (ConformalConfig, SmoothSet, scores_all, sigmoid,
                        score_logit_grad_weighted)

H_FLOOR = 1e-8


@dataclass(frozen=True)
class LossComponents:
    """Sample means of the loss and its two partials at fixed tau."""

    ell_bar: float
    dl_dtheta_bar: np.ndarray
    dl_dtau_bar: float
    n_active: int = 0


def size_loss(smooth: SmoothSet, kappa: float) -> float:
    """Hinge on the smooth set size: max(0, sum(memberships) - kappa)."""
    if kappa < 0:
        raise ValueError(f"target size must be >= 0, got {kappa}")
    return max(0.0, smooth.size - float(kappa))


def _iter_examples(batch):
    """Accept a list of Examples or an (X, y) array pair."""
    if isinstance(batch, tuple) and len(batch) == 2:
        xs, ys = batch
        return [(np.asarray(xs[i], dtype=np.float64), int(ys[i]))
                for i in range(len(ys))]
    return [(ex.x, ex.y) for ex in batch]


def loss_and_partials(model: nn.Model, tau_hat: float, batch_pred,
                      config: ConformalConfig) -> LossComponents:
    """Mean hinge loss plus its theta- and tau-partials at fixed tau_hat.

    An example is active when its smooth size strictly exceeds the target;
    inactive examples contribute zero to all three components.
    """
    pairs = _iter_examples(batch_pred)
    if not pairs:
        raise ValueError("loss_and_partials needs a nonempty prediction batch")
    temp = config.temperature
    kappa = float(config.target_size)
    ell_sum = 0.0
    dtau_sum = 0.0
    grad_sum = np.zeros(model.param_count)
    n_active = 0
    for x, y in pairs:
        logits = nn.forward(model, x)
        s = scores_all(logits, config.score_kind)
        m = sigmoid((s - tau_hat) / temp)
        size = float(m.sum())
        if size > kappa:
            n_active += 1
            ell_sum += size - kappa
            w = m * (1.0 - m) / temp          # sigma'((E_y - tau)/T) / T
            cot = score_logit_grad_weighted(logits, w, config.score_kind)
            grad_sum += nn.vjp_params(model, x, cot)
            dtau_sum -= float(w.sum())
    n = len(pairs)
    return LossComponents(ell_sum / n, grad_sum / n, dtau_sum / n, n_active)


def h_transform(ell_bar: float) -> tuple[float, float]:
    """Monotone log transform of the mean loss: (h, h'), floored at 1e-8."""
    if ell_bar < 0.0:
        raise ValueError(f"mean loss must be >= 0, got {ell_bar}")
    floored = max(ell_bar, H_FLOOR)
    return float(np.log(floored)), 1.0 / floored


def reg_grad(model: nn.Model, lam: float) -> np.ndarray:
    """Gradient of the L2 regularizer lambda * ||theta||^2."""
    if lam < 0.0:
        raise ValueError(f"regularizer weight must be >= 0, got {lam}")
    return 2.0 * lam * model.params


def cross_entropy_and_grad(model: nn.Model, batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient; optional base-loss hook."""
    pairs = _iter_examples(batch)
    if not pairs:
        raise ValueError("cross_entropy_and_grad needs a nonempty batch")
    total = 0.0
    grad = np.zeros(model.param_count)
    for x, y in pairs:
        logits = nn.forward(model, x)
        z = logits - logits.max()
        log_probs = z - np.log(np.exp(z).sum())
        total -= float(log_probs[y])
        p = np.exp(log_probs)
        cot = p.copy()
        cot[y] -= 1.0
        grad += nn.vjp_params(model, x, cot)
    n = len(pairs)
    return total / n, grad / n
