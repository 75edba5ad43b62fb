"""``metashift`` command line: gen, train, calibrate, adapt, sweep, eval.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import io as fio
from .adapt import EmConfig, em_estimate_prior, fix_class_marginal, reweight_posterior
from .calibrate import CalibrationFitConfig, CalibrationParams, apply_bcts, fit_bcts
from .core import MetaLabelSpace, marginalize_classes, predict_class
from .exceptions import InvalidInputError, MetashiftError, NumericalFailureError
from .harness import SweepConfig, run_calibration_ablation, run_sweep
from .metrics import group_accuracy, roc_auc
from .synthdata import default_anchors, lambda_prior, load_spec, sample_dataset
from .train import TrainConfig, predict_logits, subsample_balanced, train_softmax

logger = logging.getLogger("metashift")


class UsageError(Exception):
    pass


def _flag_error(flag, message):
    return UsageError(f"{flag}: {message}")


# gen ---------------------------------------------------------------------

def cmd_gen(args):
    try:
        spec = load_spec(args.spec)
    except MetashiftError as exc:
        raise _flag_error("--spec", str(exc))
    if not 0.0 <= args.prior_lambda <= 1.0:
        raise _flag_error("--prior-lambda", f"must lie in [0, 1], got {args.prior_lambda}")
    if args.n < 0:
        raise _flag_error("--n", "must be nonnegative")
    if spec.space != default_anchors().p0.space:
        raise _flag_error("--spec", "lambda priors need a C=2, K=2 spec")
    prior = lambda_prior(default_anchors(), args.prior_lambda)
    fio.write_dataset(args.out, sample_dataset(prior, spec, args.n, args.seed))
    return 0


# train -------------------------------------------------------------------

def _space_from_args(args, data_space):
    if args.num_classes is not None or args.num_groups is not None:
        if args.num_classes is None or args.num_groups is None:
            raise UsageError("--num-classes and --num-groups must be given together")
        return MetaLabelSpace(args.num_classes, args.num_groups)
    if data_space is None:
        raise UsageError("cannot infer C and K from an empty dataset; pass --num-classes/--num-groups")
    return data_space


def cmd_train(args):
    x, y, z, space = fio.read_dataset(args.data)
    space = _space_from_args(args, space)
    meta = space.encode(y, z)
    if args.subg:
        x, meta = subsample_balanced(x, meta, args.seed, space.size)
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                         ema_decay=args.ema_decay, patience=args.patience, l2=args.l2, seed=args.seed)
    model = train_softmax(x, meta, args.mode, config, space=space)
    fio.write_model(args.out, model)
    return 0


# calibrate ---------------------------------------------------------------

def _logits_from_args(args, space=None):
    """Logits either from ``--logits`` or from ``--model`` applied to features."""
    if args.logits:
        logits, space = fio.read_matrix(args.logits, space)
        return logits, space, None
    if not args.model:
        raise UsageError("either --logits or --model is required")
    model = fio.read_model(args.model)
    features_path = getattr(args, "features", None) or getattr(args, "data", None)
    if not features_path:
        raise UsageError("--model needs --features (or --data) to compute logits")
    x, _, _, _ = fio.read_dataset(features_path, model.space, require_labels=False)
    if x.shape[1] != model.n_features:
        raise InvalidInputError(
            f"{features_path}: model expects {model.n_features} feature columns, found {x.shape[1]}")
    return predict_logits(model, x), model.space, model


def cmd_calibrate(args):
    if args.model and not args.logits:
        args.features = args.data
    logits, space, _ = _logits_from_args(args)
    _, y, z, _ = fio.read_dataset(args.data, space)
    if len(y) != len(logits):
        raise InvalidInputError(f"{len(logits)} logit rows but {len(y)} labelled rows in {args.data}")
    config = CalibrationFitConfig(learning_rate=args.lr, max_epochs=args.max_epochs, ema_decay=args.ema_decay,
                                  patience=args.patience, batch_size=args.batch_size, seed=args.seed)
    params = fit_bcts(args.logit_scale * logits, space.encode(y, z), config)
    fio.write_calibration(args.out, params)
    return 0


# adapt -------------------------------------------------------------------

def cmd_adapt(args):
    space = None
    if args.num_classes is not None and args.num_groups is not None:
        space = MetaLabelSpace(args.num_classes, args.num_groups)
    logits, space, model = _logits_from_args(args, space)
    params = fio.read_calibration(args.calibration) if args.calibration else CalibrationParams.identity(space.size)
    if len(params.bias) != space.size:
        raise InvalidInputError(f"calibration has {len(params.bias)} biases, expected {space.size}")
    posterior = apply_bcts(args.logit_scale * logits, params)
    if args.source_prior:
        source_prior = fio.read_prior(args.source_prior, space)
    elif model is not None:
        source_prior = model.training_prior
    else:
        raise UsageError("--source-prior is required when adapting external logits")
    alpha = np.full(space.size, args.alpha)
    result = em_estimate_prior(posterior, source_prior,
                               EmConfig(alpha, tolerance=args.tol, max_iterations=args.max_iter))
    target = result.target_prior
    if args.fix_class_marginal:
        target = fix_class_marginal(target, source_prior.class_marginal())
    fio.write_prior(args.out_prior, target)
    if args.out_posterior:
        fio.write_matrix(args.out_posterior, reweight_posterior(posterior, source_prior, target), space, "p")
    if args.out_result:
        fio.write_em_result(args.out_result, result)
    return 0


# eval --------------------------------------------------------------------

def cmd_eval(args):
    posterior, space = fio.read_matrix(args.posterior)
    _, y, z, _ = fio.read_dataset(args.data, space)
    if len(y) != len(posterior):
        raise InvalidInputError(f"{len(posterior)} posterior rows but {len(y)} labelled rows in {args.data}")
    report = group_accuracy(predict_class(posterior, space), y, z, space)
    rows = []
    if space.num_classes == 2:
        auc = roc_auc(marginalize_classes(posterior, space)[:, 1], y)
        rows.append(("auc", auc))
    rows += [("worst_group_accuracy", report.worst),
             ("average_group_accuracy", report.average),
             ("weighted_accuracy", report.weighted_average)]
    for m in range(space.size):
        gy, gz = space.decode(m)
        rows.append((f"count_y{gy}_z{gz}", int(report.counts[m])))
        if report.counts[m]:
            rows.append((f"accuracy_y{gy}_z{gz}", report.per_group[m]))
    fio._write_rows(args.out, ["metric", "value"], rows)
    return 0


# sweep -------------------------------------------------------------------

def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(kind):
    def parse(text):
        return tuple(kind(part.strip()) for part in text.split(",") if part.strip())
    return parse


_SWEEP_KEYS = {
    "lambdas": _parse_list(float),
    "source_lambda": float,
    "adaptation_batch_sizes": _parse_list(int),
    "n_train": int,
    "n_test_per_target": int,
    "replicates": int,
    "calibration_enabled": _parse_bool,
    "methods": _parse_list(str),
    "base_seed": int,
    "holdout_fraction": float,
    "logit_scale": float,
    "source_prior_estimate": str,
    "dirichlet_alpha": float,
    "record_priors": _parse_bool,
}
_TRAIN_KEYS = {"learning_rate": float, "batch_size": int, "max_epochs": int, "ema_decay": float,
               "patience": int, "l2": float}
_CALIB_KEYS = {"learning_rate": float, "batch_size": int, "max_epochs": int, "ema_decay": float,
               "patience": int}


def parse_sweep_config(values):
    """Build ``(SweepConfig, spec name, ablation flag)`` from key=value pairs."""
    sweep, train, calib = {}, {}, {}
    spec_name, ablation = "gauss-cmnist", False
    unknown, bad = [], []
    for key, raw in values.items():
        try:
            if key in _SWEEP_KEYS:
                sweep[key] = _SWEEP_KEYS[key](raw)
            elif key.startswith("train_") and key[6:] in _TRAIN_KEYS:
                train[key[6:]] = _TRAIN_KEYS[key[6:]](raw)
            elif key.startswith("calibration_") and key[12:] in _CALIB_KEYS:
                calib[key[12:]] = _CALIB_KEYS[key[12:]](raw)
            elif key == "spec":
                spec_name = raw
            elif key == "ablation":
                ablation = _parse_bool(raw)
            else:
                unknown.append(key)
        except ValueError as exc:
            bad.append(f"{key} ({exc})")
    if unknown:
        raise UsageError(f"--config: unknown keys: {', '.join(sorted(unknown))}")
    if bad:
        raise UsageError(f"--config: invalid values: {'; '.join(bad)}")
    if "methods" in sweep and not sweep["methods"]:
        raise UsageError("--config: methods must not be empty")
    config = SweepConfig(**sweep, train=TrainConfig(**train), calibration=CalibrationFitConfig(**calib))
    return config, spec_name, ablation


def _config_digest(config, spec_name, ablation):
    payload = json.dumps({"config": asdict(config), "spec": spec_name, "ablation": ablation},
                         sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()


def write_sweep_output(out_dir, output, space, config):
    os.makedirs(out_dir, exist_ok=True)
    fio._write_rows(os.path.join(out_dir, "sweep.csv"), ["lambda", "method", "seed", "auc"],
                    ([r.lam, r.method, r.seed, r.auc] for r in output.records))
    fio._write_rows(os.path.join(out_dir, "summary.csv"), ["lambda", "method", "mean_auc", "sem", "n"],
                    ([lam, method, *stats] for (lam, method), stats in _ordered_summary(output, config)))
    if config.record_priors and output.priors:
        header = ["lambda", "method", "seed", "batch"] + [f"p{m}" for m in range(space.size)]
        fio._write_rows(os.path.join(out_dir, "priors.csv"), header,
                        ([lam, method, seed, batch, *probs] for lam, method, seed, batch, probs in output.priors),
                        comment=f"C={space.num_classes} K={space.num_groups}")


def _ordered_summary(output, config):
    rank = {v: i for i, v in enumerate(config.method_variants)}
    return sorted(output.summary.items(), key=lambda kv: (kv[0][0], rank[kv[0][1]]))


def cmd_sweep(args):
    values = fio.read_key_values(args.config) if args.config else {}
    config, spec_name, ablation = parse_sweep_config(values)
    if args.ablation:
        ablation = True
    try:
        spec = load_spec(spec_name)
    except MetashiftError as exc:
        raise UsageError(f"--config: spec: {exc}")
    workers = args.workers
    if ablation:
        result = run_calibration_ablation(config, spec, workers=workers)
        write_sweep_output(os.path.join(args.out_dir, "calibrated"), result.calibrated, spec.space, config)
        write_sweep_output(os.path.join(args.out_dir, "uncalibrated"), result.uncalibrated, spec.space, config)
    else:
        output = run_sweep(config, spec, workers=workers)
        write_sweep_output(args.out_dir, output, spec.space, config)
    manifest = {
        "config_sha256": _config_digest(config, spec_name, ablation),
        "spec": spec_name,
        "ablation": ablation,
        "seeds": list(config.seeds),
        "method_variants": list(config.method_variants),
        "lambdas": list(config.lambdas),
        "rng": "numpy PCG64 via SeedSequence([seed, purpose, index])",
    }
    with open(os.path.join(args.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="metashift",
                                     description="Test-time adaptation to joint class/nuisance prior shift.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a synthetic labelled dataset")
    p.add_argument("--spec", default="gauss-cmnist", help="builtin spec name or JSON spec file")
    p.add_argument("--prior-lambda", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a linear softmax model over meta-labels")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("erm", "logit_adjusted"), default="erm")
    p.add_argument("--subg", action="store_true", help="group-balanced subsampling before training")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--num-groups", type=int)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=5000)
    p.add_argument("--ema-decay", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit temperature and bias on labelled source data")
    p.add_argument("--data", required=True, help="labelled CSV (features used with --model)")
    p.add_argument("--model")
    p.add_argument("--logits")
    p.add_argument("--logit-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--ema-decay", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("adapt", help="estimate the target prior and adapted posteriors")
    p.add_argument("--logits", help="source-posterior logits CSV for the unlabeled target rows")
    p.add_argument("--model")
    p.add_argument("--features", help="unlabeled target features CSV (with --model)")
    p.add_argument("--calibration")
    p.add_argument("--source-prior")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--num-groups", type=int)
    p.add_argument("--logit-scale", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0, help="symmetric Dirichlet concentration (1 = MLE)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--fix-class-marginal", action="store_true")
    p.add_argument("--out-prior", required=True)
    p.add_argument("--out-posterior")
    p.add_argument("--out-result")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="AUC and group accuracies of a posterior file")
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the lambda shift sweep")
    p.add_argument("--config", help="key=value config file; defaults when omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default: METASHIFT_THREADS or CPU count)")
    p.add_argument("--ablation", action="store_true", help="also run without calibration")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"metashift {args.command}: {exc}", file=sys.stderr)
        return 2
    except NumericalFailureError as exc:
        print(f"metashift {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except MetashiftError as exc:
        print(f"metashift {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
