"""Command-line surface: train / eval / study / gen-gmm.

Configs are flat ``key = value`` files with one section per concern; every
key is checked against the schema below and unknown keys are rejected. All
randomness flows from the single [run] seed through named substreams, so a
command is a pure function of (config, input files, seed).
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .conformal import ConformalConfig, ScoreKind
from .data import (Dataset, DataFormatError, GmmSpec, gen_gmm, load_dataset,
                   load_idx, save_dataset, split_dataset)
from .estimators import EpsThreshold, parse_estimator
from .evaluate import (StudyReport, bias_identity_checks,
                       covariance_bound_checks, estimator_study, evaluate,
                       variance_ratio_checks)
from .train import TrainConfig, train

DATA_DIR_ENV = "CRM_DATA_DIR"

_SCHEMA = {
    "run": {"seed"},
    "model": {"layers"},
    "conformal": {"alpha", "temperature", "target_size", "size_weight",
                  "reg_weight", "score_kind"},
    "train": {"batch_size", "epochs", "base_lr", "momentum", "estimator",
              "base_loss_weight"},
    "data": {"source", "path", "train_images", "train_labels", "test_images",
             "test_labels", "train_size", "cal_size", "test_size"},
    "gmm": {"means", "covariances", "weights", "num_samples", "seed",
            "out_name"},
    "eval": {"trials"},
    "study": {"estimators", "batch_sizes", "trials", "check_epsilon",
              "bias_batch_sizes", "bias_trials", "cov_batch_sizes",
              "cov_trials", "ratio_n_lo", "ratio_n_hi", "oracle_samples",
              "window_samples"},
}


class ConfigError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


def load_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
    return parser


def _get(cfg, section, key, cast, default=None, required=False):
    if not cfg.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key {key!r} in [{section}]")
        return default
    raw = cfg.get(section, key)
    try:
        return cast(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _parse_layers(text: str) -> tuple[nn.LayerSpec, ...]:
    layers = []
    for part in text.split(","):
        fields = [f.strip() for f in part.strip().split(":")]
        if len(fields) == 2:
            layers.append(nn.LayerSpec(int(fields[0]), int(fields[1])))
        elif len(fields) == 3:
            layers.append(nn.LayerSpec(int(fields[0]), int(fields[1]),
                                       fields[2]))
        else:
            raise ValueError(f"bad layer spec {part!r}; want in:out[:relu]")
    return tuple(layers)


def _parse_matrix(text: str) -> np.ndarray:
    rows = [r.strip() for r in text.split(";") if r.strip()]
    return np.array([[float(v) for v in r.split()] for r in rows])


def _parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()])


def _parse_int_list(text: str) -> list[int]:
    return [int(v.strip()) for v in text.split(",") if v.strip()]


def run_seed(cfg, override: int | None) -> int:
    if override is not None:
        return int(override)
    return _get(cfg, "run", "seed", int, default=0)


def conformal_config(cfg) -> ConformalConfig:
    try:
        return ConformalConfig(
            alpha=_get(cfg, "conformal", "alpha", float, required=True),
            temperature=_get(cfg, "conformal", "temperature", float, 1.0),
            target_size=_get(cfg, "conformal", "target_size", int, 1),
            size_weight=_get(cfg, "conformal", "size_weight", float, 1.0),
            reg_weight=_get(cfg, "conformal", "reg_weight", float, 0.0),
            score_kind=_get(cfg, "conformal", "score_kind", ScoreKind.parse,
                            ScoreKind.LOG_PROBABILITY),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def gmm_spec(cfg, seed: int) -> GmmSpec:
    if not cfg.has_section("gmm"):
        raise ConfigError("missing [gmm] section")
    means = _get(cfg, "gmm", "means", _parse_matrix, required=True)
    covs = _get(cfg, "gmm", "covariances", _parse_matrix, required=True)
    weights = _get(cfg, "gmm", "weights", _parse_vector, None)
    if weights is None:
        weights = np.full(means.shape[0], 1.0 / means.shape[0])
    try:
        return GmmSpec(
            means=means,
            covariances=covs,
            weights=weights,
            num_samples=_get(cfg, "gmm", "num_samples", int, required=True),
            seed=_get(cfg, "gmm", "seed", int, default=seed),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _data_path(raw: str) -> Path:
    path = Path(raw)
    if not path.is_absolute():
        root = os.environ.get(DATA_DIR_ENV, "")
        if root:
            path = Path(root) / path
    return path


def load_pools(cfg, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Materialize (train, calibration, test) pools per the [data] section."""
    source = _get(cfg, "data", "source", str, required=True).strip().lower()
    if source == "gmm":
        ds = gen_gmm(gmm_spec(cfg, seed))
        sizes = (_get(cfg, "data", "train_size", int, required=True),
                 _get(cfg, "data", "cal_size", int, required=True),
                 _get(cfg, "data", "test_size", int, required=True))
        try:
            return split_dataset(ds, sizes, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if source == "cache":
        path = _data_path(_get(cfg, "data", "path", str, required=True))
        if not path.is_file():
            raise ConfigError(f"dataset cache not found: {path}")
        ds = load_dataset(path)
        sizes = (_get(cfg, "data", "train_size", int, required=True),
                 _get(cfg, "data", "cal_size", int, required=True),
                 _get(cfg, "data", "test_size", int, required=True))
        try:
            return split_dataset(ds, sizes, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if source == "idx":
        train_images = _data_path(_get(cfg, "data", "train_images", str,
                                       required=True))
        train_labels = _data_path(_get(cfg, "data", "train_labels", str,
                                       required=True))
        test_images = _data_path(_get(cfg, "data", "test_images", str,
                                      required=True))
        test_labels = _data_path(_get(cfg, "data", "test_labels", str,
                                      required=True))
        for p in (train_images, train_labels, test_images, test_labels):
            if not p.is_file():
                raise ConfigError(f"dataset file not found: {p}")
        full_train = load_idx(train_images, train_labels)
        test_pool = load_idx(test_images, test_labels)
        n_train = _get(cfg, "data", "train_size", int, required=True)
        n_cal = _get(cfg, "data", "cal_size", int, required=True)
        try:
            train_set, cal_pool, _ = split_dataset(full_train,
                                                   (n_train, n_cal, 0), seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return train_set, cal_pool, test_pool
    raise ConfigError(f"unknown data source {source!r}; "
                      f"expected gmm, cache or idx")


def train_config(cfg, seed: int) -> TrainConfig:
    try:
        return TrainConfig(
            batch_size=_get(cfg, "train", "batch_size", int, required=True),
            epochs=_get(cfg, "train", "epochs", int, required=True),
            base_lr=_get(cfg, "train", "base_lr", float, required=True),
            momentum=_get(cfg, "train", "momentum", float, 0.9),
            estimator=_get(cfg, "train", "estimator", parse_estimator,
                           required=True),
            conformal=conformal_config(cfg),
            seed=seed,
            base_loss_weight=_get(cfg, "train", "base_loss_weight", float, 0.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_model(cfg, seed: int) -> nn.Model:
    layers = _get(cfg, "model", "layers", _parse_layers, required=True)
    return nn.init_model(layers, seed)


def cmd_train(config_path, out_dir, seed_override=None) -> int:
    cfg = load_config(config_path)
    seed = run_seed(cfg, seed_override)
    tcfg = train_config(cfg, seed)
    model = build_model(cfg, seed)
    train_set, cal_pool, test_pool = load_pools(cfg, seed)
    if train_set.feature_dim != model.input_dim:
        raise ConfigError(f"model expects {model.input_dim} features, "
                          f"dataset has {train_set.feature_dim}")
    model, history = train(model, train_set, (cal_pool, test_pool), tcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_model(model, out / "checkpoint.crml")
    history.write_csv(out / "history.csv")
    last = history.records[-1]
    print(f"epoch {last.epoch}: train_loss={last.train_loss:.6g} "
          f"test_acc={last.test_acc:.4f} avg_set_size={last.avg_set_size:.4f} "
          f"coverage={last.coverage:.4f}")
    return 0


def cmd_eval(config_path, checkpoint, out_dir, seed_override=None,
             trials_override=None) -> int:
    cfg = load_config(config_path)
    seed = run_seed(cfg, seed_override)
    conf = conformal_config(cfg)
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = nn.load_model(ckpt)
    _, cal_pool, test_pool = load_pools(cfg, seed)
    trials = trials_override if trials_override is not None else \
        _get(cfg, "eval", "trials", int, default=10)
    report = evaluate(model, cal_pool, test_pool, conf.alpha, trials, seed,
                      conf.score_kind)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "eval_per_class.csv").write_text(report.per_class_csv(),
                                            encoding="utf-8")
    print(f"accuracy={report.accuracy:.4f} "
          f"coverage={report.coverage_mean:.4f}±{report.coverage_std:.4f} "
          f"avg_size={report.avg_size_mean:.4f}±{report.avg_size_std:.4f} "
          f"({report.trials} trials)")
    return 0


def cmd_study(config_path, out_dir, seed_override=None) -> int:
    cfg = load_config(config_path)
    seed = run_seed(cfg, seed_override)
    conf = conformal_config(cfg)
    model = build_model(cfg, seed)
    spec = gmm_spec(cfg, seed)

    estimators = [parse_estimator(e.strip()) for e in
                  _get(cfg, "study", "estimators", str,
                       "naive, eps:0.256, m_rank:6").split(",")]
    batch_sizes = _get(cfg, "study", "batch_sizes", _parse_int_list,
                       [50, 100, 200, 500, 1000])
    trials = _get(cfg, "study", "trials", int, 1000)
    eps_default = next((e.epsilon for e in estimators
                        if isinstance(e, EpsThreshold)), None)
    check_eps = _get(cfg, "study", "check_epsilon", float, eps_default)
    if check_eps is None:
        raise ConfigError("study needs an eps estimator or check_epsilon")
    bias_ns = _get(cfg, "study", "bias_batch_sizes", _parse_int_list, [2, 5, 20])
    bias_trials = _get(cfg, "study", "bias_trials", int, 100_000)
    cov_ns = _get(cfg, "study", "cov_batch_sizes", _parse_int_list,
                  [50, 200, 1000])
    cov_trials = _get(cfg, "study", "cov_trials", int, 2000)
    ratio_lo = _get(cfg, "study", "ratio_n_lo", int, 100)
    ratio_hi = _get(cfg, "study", "ratio_n_hi", int, 1000)
    oracle_mc = _get(cfg, "study", "oracle_samples", int, 1_000_000)
    window_mc = _get(cfg, "study", "window_samples", int, 1_000_000)

    try:
        descriptive = estimator_study(
            model, spec, conf.alpha, conf.score_kind, estimators, batch_sizes,
            trials, seed, center="estimated", oracle_mc=oracle_mc,
            window_mc=window_mc)
        eps_est = [EpsThreshold(check_eps)]
        bias_rep = estimator_study(
            model, spec, conf.alpha, conf.score_kind, eps_est, bias_ns,
            bias_trials, seed, center="oracle", reuse=descriptive)
        cov_rep = estimator_study(
            model, spec, conf.alpha, conf.score_kind, eps_est, cov_ns,
            cov_trials, seed, center="oracle", reuse=bias_rep)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    merged = StudyReport(alpha=descriptive.alpha, kind=descriptive.kind,
                         seed=seed, oracle_eta=descriptive.oracle_eta,
                         oracle_eta_se=descriptive.oracle_eta_se,
                         tau=descriptive.tau,
                         rows=descriptive.rows + bias_rep.rows + cov_rep.rows,
                         windows=dict(descriptive.windows))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged.write_csv(out / "study.csv")

    checks = bias_identity_checks(bias_rep, check_eps, bias_ns)
    checks += covariance_bound_checks(cov_rep, check_eps, cov_ns)
    vr_desc = next((e.describe() for e in estimators
                    if isinstance(e, EpsThreshold)), None)
    if vr_desc is not None and ratio_lo in batch_sizes and \
            ratio_hi in batch_sizes:
        checks += variance_ratio_checks(descriptive, vr_desc,
                                        ratio_lo, ratio_hi)
    failed = False
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: {c.detail}")
        failed |= not c.passed
    return 1 if failed else 0


def cmd_gen_gmm(config_path, out_dir, seed_override=None) -> int:
    cfg = load_config(config_path)
    seed = run_seed(cfg, seed_override)
    spec = gmm_spec(cfg, seed)
    ds = gen_gmm(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = _get(cfg, "gmm", "out_name", str, "gmm.crmd")
    save_dataset(ds, out / name)
    print(f"wrote {len(ds)} examples to {out / name}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="crmtrain",
        description="Conformal risk minimization with variance-reduced "
                    "quantile-gradient estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "study", "gen-gmm"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--trials", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed)
        if args.command == "eval":
            return cmd_eval(args.config, args.checkpoint, args.out,
                            args.seed, args.trials)
        if args.command == "study":
            return cmd_study(args.config, args.out, args.seed)
        return cmd_gen_gmm(args.config, args.out, args.seed)
    except (ConfigError, DataFormatError, nn.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
