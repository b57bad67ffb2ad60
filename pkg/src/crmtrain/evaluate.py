"""Post-training conformal evaluation and the estimator bias/variance study.

The study measures each quantile-gradient estimator against a Monte-Carlo
oracle: central finite differences of the population quantile, evaluated on
one large common-random-number draw so the sampling noise cancels between
the two sides of each difference. Window quantities (selection probability,
conditional mean and covariance of the score gradient) are estimated from a
separate large draw and carry standard errors so the bias/variance theory
checks can be stated in units of Monte-Carlo error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .conformal import (ScoreKind, empirical_quantile, metrics_from_mask,
                        score_batch, scores_all)
from .data import Dataset, GmmSpec, sample_gmm
from .estimators import (EpsThreshold, EstimatorKind, MRanking, Naive,
                         estimate, eta_hat, select_eps, select_m_rank)
from .rng import substream, trial_streams


# ---------------------------------------------------------------------------
# Post-training evaluation over randomized calibration/test splits.

@dataclass
class EvalReport:
    accuracy: float
    coverage_mean: float
    coverage_std: float
    avg_size_mean: float
    avg_size_std: float
    per_class_coverage: np.ndarray
    per_class_size: np.ndarray
    trial_coverage: list[float]
    trial_avg_size: list[float]
    trials: int
    alpha: float

    def to_csv(self) -> str:
        lines = ["trial,coverage,avg_size"]
        for t, (cov, size) in enumerate(zip(self.trial_coverage,
                                            self.trial_avg_size)):
            lines.append(f"{t},{cov:.17g},{size:.17g}")
        return "\n".join(lines) + "\n"

    def per_class_csv(self) -> str:
        lines = ["class,coverage,avg_size"]
        for c, (cov, size) in enumerate(zip(self.per_class_coverage,
                                            self.per_class_size)):
            lines.append(f"{c},{cov:.17g},{size:.17g}")
        return "\n".join(lines) + "\n"


def evaluate(model: nn.Model, cal_pool: Dataset, test_pool: Dataset,
             alpha: float, trials: int, seed: int,
             kind: ScoreKind) -> EvalReport:
    """Repeatedly resplit the merged pools, calibrate, and measure sets.

    Each trial merges the two pools, resplits them at their original sizes,
    calibrates the threshold on the calibration portion's true-label scores,
    and records coverage and average set size of the hard threshold sets on
    the test portion. Accuracy is computed once on the original test pool.
    """
    if len(cal_pool) == 0 or len(test_pool) == 0:
        raise ValueError("evaluate needs nonempty calibration and test pools")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    num_classes = max(cal_pool.num_classes, test_pool.num_classes)

    test_logits = nn.forward_batch(model, test_pool.features)
    accuracy = float((test_logits.argmax(axis=1) == test_pool.labels).mean())

    feats = np.vstack([cal_pool.features, test_pool.features])
    labels = np.concatenate([cal_pool.labels, test_pool.labels])
    all_scores = scores_all(nn.forward_batch(model, feats), kind)
    true_scores = all_scores[np.arange(len(labels)), labels]

    n_cal = len(cal_pool)
    n_test = len(test_pool)
    covs, sizes = [], []
    per_cov = np.zeros((trials, num_classes))
    per_size = np.zeros((trials, num_classes))
    for t, rng in enumerate(trial_streams(seed, "eval", trials)):
        perm = rng.permutation(len(labels))
        cal_idx = perm[:n_cal]
        test_idx = perm[n_cal:n_cal + n_test]
        tau_hat, _ = empirical_quantile(true_scores[cal_idx], alpha)
        members = all_scores[test_idx] >= tau_hat
        m = metrics_from_mask(members, labels[test_idx], num_classes)
        covs.append(m.coverage)
        sizes.append(m.avg_size)
        per_cov[t] = m.per_class_coverage
        per_size[t] = m.per_class_size

    covs_arr = np.asarray(covs)
    sizes_arr = np.asarray(sizes)
    std = lambda a: float(a.std(ddof=1)) if trials > 1 else 0.0
    return EvalReport(
        accuracy=accuracy,
        coverage_mean=float(covs_arr.mean()),
        coverage_std=std(covs_arr),
        avg_size_mean=float(sizes_arr.mean()),
        avg_size_std=std(sizes_arr),
        per_class_coverage=np.nanmean(per_cov, axis=0),
        per_class_size=np.nanmean(per_size, axis=0),
        trial_coverage=covs,
        trial_avg_size=sizes,
        trials=trials,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo oracle for the population quantile gradient.

def _fd_quantile_grad(model: nn.Model, gmm_spec: GmmSpec, alpha: float,
                      kind: ScoreKind, n_mc: int, seed: int,
                      blocks: int = 10):
    """Central finite differences of theta -> alpha-quantile of the scores.

    One fixed draw of n_mc samples is scored under every perturbed parameter
    vector (common random numbers), which cancels most of the sampling noise
    in each difference. Block resampling of the same draw provides standard
    errors. Returns (grad, grad_se, tau_at_theta).
    """
    rng = substream(seed, "oracle")
    xs, ys = sample_gmm(gmm_spec, n_mc, rng)
    theta = model.params

    def scores_at(params: np.ndarray) -> np.ndarray:
        logits = nn.forward_batch(model.with_params(params), xs)
        return score_batch(logits, ys, kind)

    def quant(s: np.ndarray) -> float:
        tau, _ = empirical_quantile(s, alpha)
        return tau

    bounds = np.linspace(0, n_mc, blocks + 1, dtype=int) if blocks else None
    p = theta.size
    grad = np.empty(p)
    block_grads = np.empty((blocks, p)) if blocks else None
    tau0 = quant(scores_at(theta))
    for j in range(p):
        delta = 1e-3 * max(abs(theta[j]), 1.0)
        plus = theta.copy()
        plus[j] += delta
        minus = theta.copy()
        minus[j] -= delta
        s_plus = scores_at(plus)
        s_minus = scores_at(minus)
        grad[j] = (quant(s_plus) - quant(s_minus)) / (2.0 * delta)
        if blocks:
            for b in range(blocks):
                lo, hi = bounds[b], bounds[b + 1]
                block_grads[b, j] = (quant(s_plus[lo:hi]) -
                                     quant(s_minus[lo:hi])) / (2.0 * delta)
    se = (block_grads.std(axis=0, ddof=1) / np.sqrt(blocks)
          if blocks else np.zeros(p))
    return grad, se, tau0


def oracle_quantile_grad(model: nn.Model, gmm_spec: GmmSpec, alpha: float,
                         kind: ScoreKind, n_mc: int,
                         seed: int = 0) -> np.ndarray:
    """Oracle dtau/dtheta for the mixture via common-random-number FD."""
    if n_mc < 100_000:
        raise ValueError(f"oracle needs n_mc >= 1e5, got {n_mc}")
    grad, _, _ = _fd_quantile_grad(model, gmm_spec, alpha, kind, n_mc, seed,
                                   blocks=0)
    return grad


# ---------------------------------------------------------------------------
# Window (conditional) quantities for the bias/variance theory.

@dataclass(frozen=True)
class WindowStats:
    """Selection-window quantities estimated from one large draw."""

    epsilon: float
    tau: float
    p: float
    p_se: float
    eta: np.ndarray
    eta_se: np.ndarray
    sigma_trace: float
    sigma_trace_se: float
    n_window: int

    @property
    def q(self) -> float:
        return 1.0 - self.p


def window_stats(model: nn.Model, gmm_spec: GmmSpec, kind: ScoreKind,
                 epsilon: float, tau: float, n_mc: int,
                 seed: int) -> WindowStats:
    """Estimate p, eta and cov-trace of the score gradient given the window
    |E - tau| <= epsilon, from n_mc fresh draws."""
    rng = substream(seed, "study/window")
    xs, ys = sample_gmm(gmm_spec, n_mc, rng)
    scores = score_batch(nn.forward_batch(model, xs), ys, kind)
    mask = np.abs(scores - tau) <= epsilon
    n_window = int(mask.sum())
    if n_window < 2:
        raise ValueError(f"window selected only {n_window} of {n_mc} samples; "
                         f"epsilon {epsilon} too small for this draw")
    p = n_window / n_mc
    p_se = np.sqrt(p * (1.0 - p) / n_mc)

    idx = np.flatnonzero(mask)
    grads = np.empty((n_window, model.param_count))
    for row, i in enumerate(idx):
        grads[row] = nn.score_grad(model, nn.Example(xs[i], int(ys[i])), kind)
    eta = grads.mean(axis=0)
    eta_se = grads.std(axis=0, ddof=1) / np.sqrt(n_window)
    centered_sq = ((grads - eta) ** 2).sum(axis=1)
    sigma_trace = float(grads.var(axis=0, ddof=1).sum())
    sigma_trace_se = float(centered_sq.std(ddof=1) / np.sqrt(n_window))
    return WindowStats(epsilon, tau, p, float(p_se), eta, eta_se,
                       sigma_trace, sigma_trace_se, n_window)


# ---------------------------------------------------------------------------
# The estimator study.

@dataclass(frozen=True)
class StudyRow:
    estimator: str
    n: int
    center: str               # "estimated" or "oracle"
    trials: int
    mean_eta: np.ndarray
    mean_eta_se: np.ndarray
    bias: np.ndarray          # mean_eta - oracle quantile gradient
    bias_norm: float
    cov_trace: float
    cov_trace_se: float
    mean_selected: float
    empty_frac: float

    @property
    def label(self) -> str:
        suffix = "@oracle-tau" if self.center == "oracle" else ""
        return self.estimator + suffix


@dataclass
class StudyReport:
    alpha: float
    kind: str
    seed: int
    oracle_eta: np.ndarray
    oracle_eta_se: np.ndarray
    tau: float
    rows: list[StudyRow] = field(default_factory=list)
    windows: dict[float, WindowStats] = field(default_factory=dict)

    def row(self, estimator: str, n: int, center: str = "estimated") -> StudyRow:
        for r in self.rows:
            if r.estimator == estimator and r.n == n and r.center == center:
                return r
        raise KeyError(f"no study row ({estimator!r}, n={n}, {center})")

    def to_csv(self) -> str:
        lines = ["estimator,n,bias_norm,cov_trace,mc_err"]
        for r in self.rows:
            lines.append(f"{r.label},{r.n},{r.bias_norm:.17g},"
                         f"{r.cov_trace:.17g},{r.cov_trace_se:.17g}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _study_cell(model: nn.Model, gmm_spec: GmmSpec, alpha: float,
                kind: ScoreKind, estimator: EstimatorKind, n: int,
                trials: int, seed: int, center: str,
                tau_oracle: float) -> tuple[np.ndarray, float, float]:
    """Run `trials` independent size-n batches through one estimator."""
    name = f"study/{estimator.describe()}/{center}/n{n}"
    streams = trial_streams(seed, name, trials)
    etas = np.empty((trials, model.param_count))
    selected_total = 0.0
    empty = 0
    for t, rng in enumerate(streams):
        xs, ys = sample_gmm(gmm_spec, n, rng)
        batch = (xs, ys)
        if center == "oracle" and not isinstance(estimator, Naive):
            scores = score_batch(nn.forward_batch(model, xs), ys, kind)
            if isinstance(estimator, EpsThreshold):
                sel = select_eps(scores, tau_oracle, estimator.epsilon)
            elif isinstance(estimator, MRanking):
                sel, _ = select_m_rank(scores, tau_oracle, estimator.m)
            else:
                raise TypeError(f"unknown estimator {estimator!r}")
            etas[t] = eta_hat(model, batch, sel, kind)
            n_sel = sel.size
        else:
            est = estimate(model, batch, alpha, kind, estimator)
            etas[t] = est.eta_hat
            n_sel = est.n_selected
        selected_total += n_sel
        empty += n_sel == 0
    return etas, selected_total / trials, empty / trials


def estimator_study(model: nn.Model, gmm_spec: GmmSpec, alpha: float,
                    kind: ScoreKind, estimators, batch_sizes, trials: int,
                    seed: int, center: str = "estimated",
                    oracle_mc: int = 1_000_000,
                    window_mc: int = 1_000_000,
                    reuse: "StudyReport | None" = None) -> StudyReport:
    """Bias/variance of the quantile-gradient estimators vs the MC oracle.

    For every (estimator, batch size) cell, `trials` independent batches are
    drawn and estimated; the report carries the empirical mean (with per-
    component standard errors), the bias against the finite-difference
    oracle, and the covariance trace. Fixed-epsilon estimators also get the
    conditional window quantities needed by the bias/variance theory. With
    center="oracle" the selection window of the eps/m estimators sits at the
    population quantile instead of each batch's own estimate, matching the
    theory's assumption; the naive estimator always uses its batch quantile.
    """
    if trials < 100:
        raise ValueError(f"study needs trials >= 100, got {trials}")
    if center not in ("estimated", "oracle"):
        raise ValueError(f"center must be 'estimated' or 'oracle', got {center}")
    if reuse is not None:
        # Oracle and window quantities carry over between study passes that
        # share (model, spec, alpha, kind, seed).
        oracle, oracle_se, tau = reuse.oracle_eta, reuse.oracle_eta_se, reuse.tau
        report = StudyReport(alpha=alpha, kind=kind.value, seed=seed,
                             oracle_eta=oracle, oracle_eta_se=oracle_se,
                             tau=tau, windows=dict(reuse.windows))
    else:
        oracle, oracle_se, tau = _fd_quantile_grad(model, gmm_spec, alpha,
                                                   kind, oracle_mc, seed)
        report = StudyReport(alpha=alpha, kind=kind.value, seed=seed,
                             oracle_eta=oracle, oracle_eta_se=oracle_se,
                             tau=tau)
    for estimator in estimators:
        if isinstance(estimator, EpsThreshold) and \
                estimator.epsilon not in report.windows:
            report.windows[estimator.epsilon] = window_stats(
                model, gmm_spec, kind, estimator.epsilon, tau, window_mc, seed)
        for n in batch_sizes:
            etas, mean_sel, empty_frac = _study_cell(
                model, gmm_spec, alpha, kind, estimator, int(n), trials,
                seed, center, tau)
            mean_eta = etas.mean(axis=0)
            mean_eta_se = etas.std(axis=0, ddof=1) / np.sqrt(trials)
            centered_sq = ((etas - mean_eta) ** 2).sum(axis=1)
            report.rows.append(StudyRow(
                estimator=estimator.describe(),
                n=int(n),
                center=center if not isinstance(estimator, Naive) else "estimated",
                trials=trials,
                mean_eta=mean_eta,
                mean_eta_se=mean_eta_se,
                bias=mean_eta - oracle,
                bias_norm=float(np.linalg.norm(mean_eta - oracle)),
                cov_trace=float(etas.var(axis=0, ddof=1).sum()),
                cov_trace_se=float(centered_sq.std(ddof=1) / np.sqrt(trials)),
                mean_selected=mean_sel,
                empty_frac=empty_frac,
            ))
    return report


# ---------------------------------------------------------------------------
# Theory checks stated in units of Monte-Carlo error.

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def bias_identity_checks(report: StudyReport, epsilon: float,
                         ns) -> list[CheckResult]:
    """Mean of the fixed-eps estimator vs (1 - q^n) * eta_eps, componentwise
    within 3 combined standard errors."""
    w = report.windows[epsilon]
    desc = EpsThreshold(epsilon).describe()
    out = []
    for n in ns:
        row = report.row(desc, int(n), "oracle")
        shrink = 1.0 - w.q ** n
        theory = shrink * w.eta
        # delta-method error of the theory side: d(1-q^n)/dp = n q^(n-1)
        theory_se = np.sqrt((n * w.q ** (n - 1) * w.p_se * np.abs(w.eta)) ** 2
                            + (shrink * w.eta_se) ** 2)
        tol = 3.0 * np.sqrt(row.mean_eta_se ** 2 + theory_se ** 2)
        diff = np.abs(row.mean_eta - theory)
        worst = float((diff / tol).max())
        out.append(CheckResult(
            name=f"bias-identity n={n}",
            passed=bool(np.all(diff <= tol)),
            detail=f"max |diff|/(3se) = {worst:.3f} over "
                   f"{row.mean_eta.size} components",
        ))
    return out


def covariance_bound_checks(report: StudyReport, epsilon: float, ns,
                            slope_range=(-1.35, -0.65)) -> list[CheckResult]:
    """Empirical covariance trace against 2 tr(Sigma)/(p n) + q^n |eta|^2,
    plus the log-log decay slope across the batch sizes."""
    w = report.windows[epsilon]
    desc = EpsThreshold(epsilon).describe()
    out = []
    traces = []
    for n in ns:
        n = int(n)
        row = report.row(desc, n, "oracle")
        traces.append(row.cov_trace)
        eta_sq = float(w.eta @ w.eta)
        bound = 2.0 * w.sigma_trace / (w.p * n) + w.q ** n * eta_sq
        dbound_dp = -2.0 * w.sigma_trace / (w.p ** 2 * n) \
            - n * w.q ** (n - 1) * eta_sq
        eta_sq_se = float(np.sqrt(((2.0 * w.eta * w.eta_se) ** 2).sum()))
        bound_se = np.sqrt((dbound_dp * w.p_se) ** 2
                           + (2.0 / (w.p * n) * w.sigma_trace_se) ** 2
                           + (w.q ** n * eta_sq_se) ** 2)
        mc_err = float(np.sqrt(row.cov_trace_se ** 2 + bound_se ** 2))
        out.append(CheckResult(
            name=f"cov-bound n={n}",
            passed=row.cov_trace <= bound + 3.0 * mc_err,
            detail=f"trace {row.cov_trace:.4g} vs bound {bound:.4g} "
                   f"+ 3*{mc_err:.2g}",
        ))
    slope = np.polyfit(np.log(np.asarray(ns, dtype=float)),
                       np.log(np.asarray(traces)), 1)[0]
    lo, hi = slope_range
    out.append(CheckResult(
        name="cov-slope",
        passed=bool(lo <= slope <= hi),
        detail=f"log-log slope {slope:.3f}, want [{lo}, {hi}]",
    ))
    return out


def variance_ratio_checks(report: StudyReport, vr_estimator: str,
                          n_lo: int = 100, n_hi: int = 1000,
                          naive_min: float = 0.5,
                          vr_max: float = 0.2) -> list[CheckResult]:
    """Non-vanishing naive variance vs decaying variance-reduced variance."""
    naive_desc = Naive().describe()
    naive_ratio = (report.row(naive_desc, n_hi, "estimated").cov_trace /
                   report.row(naive_desc, n_lo, "estimated").cov_trace)
    vr_ratio = (report.row(vr_estimator, n_hi, "estimated").cov_trace /
                report.row(vr_estimator, n_lo, "estimated").cov_trace)
    return [
        CheckResult(
            name="naive-variance-persists",
            passed=naive_ratio >= naive_min,
            detail=f"var({n_hi})/var({n_lo}) = {naive_ratio:.3f} >= {naive_min}",
        ),
        CheckResult(
            name="vr-variance-decays",
            passed=vr_ratio <= vr_max,
            detail=f"var({n_hi})/var({n_lo}) = {vr_ratio:.3f} <= {vr_max}",
        ),
    ]
