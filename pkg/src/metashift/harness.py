"""Distribution-shift sweep over the lambda-mixture family.

For every replicate seed a source set is drawn at ``source_lambda`` and three
base classifiers are trained (ERM, SUBG, logit-adjusted). Each target lambda
gets a fresh labelled test pool; every method scores the same pool and is
summarised by the AUC of the class-1 marginal.

Seeds are derived from ``(base_seed + replicate, purpose, index)`` through
``SeedSequence``, and results are reduced in canonical order, so output does
not depend on the number of worker threads.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import EmConfig, em_estimate_prior, reweight_posterior
from .calibrate import CalibrationFitConfig, CalibrationParams, apply_bcts, fit_bcts
from .core import JointPrior, marginalize_classes
from .exceptions import InvalidParameterError, MetashiftError, NumericalFailureError
from .metrics import SweepRecord, roc_auc
from .synthdata import AnchorPair, GaussianGenerativeSpec, default_anchors, lambda_prior, sample_dataset
from .train import LinearSoftmaxModel, TrainConfig, predict_logits, subsample_balanced, train_softmax

logger = logging.getLogger(__name__)

METHODS = ("erm", "subg", "la", "ttlsa", "oracle")
SOURCE_PRIOR_ESTIMATES = ("count", "average", "true")
DEFAULT_LAMBDAS = tuple(round(0.05 * i, 2) for i in range(21))

# purpose tags for seed derivation
_SOURCE, _SPLIT, _TEST, _TRAIN, _SUBG, _CALIB = range(6)


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple = DEFAULT_LAMBDAS
    source_lambda: float = 0.05
    adaptation_batch_sizes: tuple = (64, 512)
    n_train: int = 20000
    n_test_per_target: int = 512
    replicates: int = 4
    calibration_enabled: bool = True
    methods: tuple = METHODS
    base_seed: int = 0
    holdout_fraction: float = 0.1
    logit_scale: float = 1.0
    source_prior_estimate: str = "count"
    dirichlet_alpha: float = 1.0
    record_priors: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationFitConfig = field(default_factory=CalibrationFitConfig)

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "adaptation_batch_sizes", tuple(int(v) for v in self.adaptation_batch_sizes))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.lambdas or any(not 0.0 <= v <= 1.0 for v in self.lambdas):
            raise InvalidParameterError("lambdas must be a nonempty list of values in [0, 1]")
        if not 0.0 <= self.source_lambda <= 1.0:
            raise InvalidParameterError("source_lambda must lie in [0, 1]")
        if not self.methods:
            raise InvalidParameterError("methods must not be empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise InvalidParameterError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if "ttlsa" in self.methods and not self.adaptation_batch_sizes:
            raise InvalidParameterError("ttlsa needs at least one adaptation batch size")
        for name in ("n_train", "n_test_per_target", "replicates"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if any(b < 1 for b in self.adaptation_batch_sizes):
            raise InvalidParameterError("adaptation batch sizes must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise InvalidParameterError("holdout_fraction must lie in (0, 1)")
        if not self.logit_scale > 0:
            raise InvalidParameterError("logit_scale must be positive")
        if self.source_prior_estimate not in SOURCE_PRIOR_ESTIMATES:
            raise InvalidParameterError(f"source_prior_estimate must be one of {SOURCE_PRIOR_ESTIMATES}")
        if self.dirichlet_alpha < 1:
            raise InvalidParameterError("dirichlet_alpha must be >= 1")

    @property
    def method_variants(self):
        variants = []
        for method in METHODS:
            if method not in self.methods:
                continue
            if method == "ttlsa":
                variants.extend(f"ttlsa_{b}" for b in self.adaptation_batch_sizes)
            else:
                variants.append(method)
        return tuple(variants)

    @property
    def seeds(self):
        return tuple(self.base_seed + r for r in range(self.replicates))


@dataclass
class SweepOutput:
    records: list
    summary: dict
    priors: list = field(default_factory=list)

    def mean(self, lam, method):
        return self.summary[(float(lam), method)][0]

    def sem(self, lam, method):
        return self.summary[(float(lam), method)][1]

    def curve(self, method):
        """``(lambdas, means, sems)`` for one method variant."""
        keys = sorted(k for k in self.summary if k[1] == method)
        lams = np.array([k[0] for k in keys])
        stats = np.array([self.summary[k][:2] for k in keys])
        return lams, stats[:, 0], stats[:, 1]


@dataclass
class AblationOutput:
    calibrated: SweepOutput
    uncalibrated: SweepOutput

    def auc_delta(self, method):
        """Per-lambda calibrated minus uncalibrated mean AUC."""
        lams, cal, _ = self.calibrated.curve(method)
        _, unc, _ = self.uncalibrated.curve(method)
        return lams, cal - unc

    def gap(self, upper, lower, calibrated=True):
        arm = self.calibrated if calibrated else self.uncalibrated
        lams, hi, _ = arm.curve(upper)
        _, lo, _ = arm.curve(lower)
        return lams, hi - lo


@dataclass
class _Replicate:
    seed: int
    models: dict
    params: dict  # calibrated flag -> {model name: CalibrationParams}
    source_priors: dict  # calibrated flag -> JointPrior


def _seed(seed, *key):
    return np.random.SeedSequence([seed, *key])


def _worker_count(workers):
    if workers is None:
        env = os.environ.get("METASHIFT_THREADS", "").strip()
        workers = int(env) if env else 0
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _posterior(model: LinearSoftmaxModel, params: CalibrationParams, x, logit_scale):
    return apply_bcts(logit_scale * predict_logits(model, x), params)


def _fit_replicate(config: SweepConfig, spec: GaussianGenerativeSpec, anchors: AnchorPair, seed: int,
                   arms=(True,)) -> _Replicate:
    space = spec.space
    source = sample_dataset(lambda_prior(anchors, config.source_lambda), spec, config.n_train,
                            _seed(seed, _SOURCE))
    meta = source.meta_labels
    order = np.random.default_rng(_seed(seed, _SPLIT)).permutation(len(source))
    n_hold = max(int(round(config.holdout_fraction * len(source))), space.size)
    hold, fit = order[:n_hold], order[n_hold:]
    x_fit, m_fit = source.features[fit], meta[fit]
    x_hold, m_hold = source.features[hold], meta[hold]

    train_seed = int(np.random.default_rng(_seed(seed, _TRAIN)).integers(2**31))
    train_cfg = replace(config.train, seed=train_seed)
    models, holdouts = {}, {}
    if "erm" in config.methods:
        models["erm"] = train_softmax(x_fit, m_fit, "erm", train_cfg, space=space)
        holdouts["erm"] = (x_hold, m_hold)
    if "subg" in config.methods:
        subg_seed = int(np.random.default_rng(_seed(seed, _SUBG)).integers(2**31))
        x_sub, m_sub = subsample_balanced(x_fit, m_fit, subg_seed, space.size)
        models["subg"] = train_softmax(x_sub, m_sub, "erm", train_cfg, space=space)
        # SUBG is calibrated on a balanced holdout too, otherwise the bias term relearns the source prior
        holdouts["subg"] = subsample_balanced(x_hold, m_hold, subg_seed + 1, space.size)
    if {"la", "ttlsa", "oracle"} & set(config.methods):
        models["la"] = train_softmax(x_fit, m_fit, "logit_adjusted", train_cfg, space=space)
        holdouts["la"] = (x_hold, m_hold)

    calib_seed = int(np.random.default_rng(_seed(seed, _CALIB)).integers(2**31))
    calib_cfg = replace(config.calibration, seed=calib_seed)
    params, source_priors = {}, {}
    for calibrated in arms:
        if calibrated:
            params[True] = {
                name: fit_bcts(config.logit_scale * predict_logits(model, holdouts[name][0]),
                               holdouts[name][1], calib_cfg)
                for name, model in models.items()
            }
        else:
            params[False] = {name: CalibrationParams.identity(space.size) for name in models}
        if config.source_prior_estimate == "true":
            source_priors[calibrated] = lambda_prior(anchors, config.source_lambda)
        elif config.source_prior_estimate == "average" and "la" in models:
            probs = _posterior(models["la"], params[calibrated]["la"], x_fit, config.logit_scale).mean(axis=0)
            source_priors[calibrated] = JointPrior(space, probs / probs.sum())
        else:
            source_priors[calibrated] = JointPrior.from_counts(space, m_fit)
    return _Replicate(seed, models, params, source_priors)


def _evaluate_cell(config, spec, anchors, rep: _Replicate, lam_index, calibrated):
    lam = config.lambdas[lam_index]
    space = spec.space
    target_prior = lambda_prior(anchors, lam)
    test = sample_dataset(target_prior, spec, config.n_test_per_target, _seed(rep.seed, _TEST, lam_index))
    params = rep.params[calibrated]
    post = {name: _posterior(model, params[name], test.features, config.logit_scale)
            for name, model in rep.models.items()}
    source_prior = rep.source_priors[calibrated]

    def score(p):
        return marginalize_classes(p, space)[:, 1]

    records, priors = [], []
    for variant in config.method_variants:
        estimate = None
        try:
            if variant in ("erm", "subg"):
                scores = score(post[variant])
            elif variant == "la":
                balanced = JointPrior(space, np.outer(source_prior.class_marginal(),
                                                      source_prior.group_marginal()).reshape(-1))
                scores = score(reweight_posterior(post["la"], source_prior, balanced))
            elif variant == "oracle":
                scores = score(reweight_posterior(post["la"], source_prior, target_prior))
            else:
                batch = int(variant.split("_")[1])
                scores = np.empty(len(test))
                estimates = []
                em_cfg = EmConfig(np.full(space.size, config.dirichlet_alpha))
                for b, start in enumerate(range(0, len(test), batch)):
                    rows = slice(start, start + batch)
                    result = em_estimate_prior(post["la"][rows], source_prior, em_cfg)
                    estimates.append(result.target_prior.probs)
                    scores[rows] = score(reweight_posterior(post["la"][rows], source_prior, result.target_prior))
                    if config.record_priors:
                        priors.append((lam, variant, rep.seed, b, result.target_prior.probs))
                mean_est = np.mean(estimates, axis=0)
                estimate = JointPrior(space, mean_est / mean_est.sum())
            auc = roc_auc(scores, test.y)
        except (MetashiftError, NumericalFailureError) as exc:
            raise type(exc)(f"lambda={lam} method={variant} seed={rep.seed}: {exc}") from exc
        records.append(SweepRecord(lam, variant, rep.seed, auc, estimate))
    return records, priors


def summarize(records):
    """``{(lambda, method): (mean_auc, sem, n)}`` with SEM = sd / sqrt(n)."""
    groups = {}
    for rec in records:
        groups.setdefault((rec.lam, rec.method), []).append(rec.auc)
    summary = {}
    for key in sorted(groups):
        values = np.asarray(groups[key])
        sem = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        summary[key] = (float(values.mean()), sem, len(values))
    return summary


def _run(config, spec, anchors, workers, arms):
    workers = _worker_count(workers)
    reps = _map(lambda s: _fit_replicate(config, spec, anchors, s, arms), config.seeds, workers)
    outputs = {}
    for calibrated in arms:
        cells = [(rep, i) for rep in reps for i in range(len(config.lambdas))]
        results = _map(lambda cell: _evaluate_cell(config, spec, anchors, cell[0], cell[1], calibrated),
                       cells, workers)
        # canonical order: lambda, method variant, seed
        variant_rank = {v: i for i, v in enumerate(config.method_variants)}
        records = sorted((r for recs, _ in results for r in recs),
                         key=lambda r: (r.lam, variant_rank[r.method], r.seed))
        priors = sorted((p for _, ps in results for p in ps),
                        key=lambda p: (p[0], variant_rank[p[1]], p[2], p[3]))
        outputs[calibrated] = SweepOutput(records, summarize(records), priors)
    return outputs, reps


def run_sweep(config: SweepConfig | None = None, spec: GaussianGenerativeSpec | None = None,
              anchors: AnchorPair | None = None, workers=None) -> SweepOutput:
    from .synthdata import gauss_cmnist_spec

    config = config or SweepConfig()
    spec = spec or gauss_cmnist_spec()
    anchors = anchors or default_anchors()
    outputs, _ = _run(config, spec, anchors, workers, (config.calibration_enabled,))
    return outputs[config.calibration_enabled]


def run_calibration_ablation(config: SweepConfig | None = None, spec: GaussianGenerativeSpec | None = None,
                             anchors: AnchorPair | None = None, workers=None) -> AblationOutput:
    """Identical sweeps with and without calibration, sharing trained models."""
    from .synthdata import gauss_cmnist_spec

    config = config or SweepConfig()
    spec = spec or gauss_cmnist_spec()
    anchors = anchors or default_anchors()
    outputs, _ = _run(config, spec, anchors, workers, (True, False))
    return AblationOutput(outputs[True], outputs[False])
