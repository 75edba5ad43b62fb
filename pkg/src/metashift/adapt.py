"""Test-time estimation of a shifted meta-label prior and posterior reweighting.

Under an invariant ``p(x | y, z)``, a calibrated source posterior divided by
the source prior is proportional to the likelihood of ``x``. That makes the
target prior the maximiser of a concave objective over the simplex, which
(MAP-)EM climbs monotonically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import EPS, JointPrior, as_prior, check_posterior, marginalize_classes, predict_class
from .exceptions import (
    DegenerateError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
    SupportViolationError,
)


@dataclass(frozen=True)
class EmConfig:
    dirichlet_alpha: np.ndarray | None = None
    tolerance: float = 1e-8
    # EM crawls towards optima on the simplex boundary; a few thousand steps can be needed there
    max_iterations: int = 10_000

    def __post_init__(self):
        if self.dirichlet_alpha is not None:
            alpha = np.array(self.dirichlet_alpha, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(alpha)) or np.any(alpha < 1):
                raise InvalidParameterError("Dirichlet concentrations must be >= 1")
            object.__setattr__(self, "dirichlet_alpha", alpha)
        if not self.tolerance > 0:
            raise InvalidParameterError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be positive")

    def alpha_for(self, n_labels):
        if self.dirichlet_alpha is None:
            return np.ones(n_labels)
        if len(self.dirichlet_alpha) != n_labels:
            raise InvalidParameterError(
                f"dirichlet_alpha has {len(self.dirichlet_alpha)} entries, expected {n_labels}")
        return self.dirichlet_alpha


@dataclass
class EmResult:
    target_prior: JointPrior
    iterations: int
    log_likelihood_trace: np.ndarray
    expected_counts: np.ndarray
    converged: bool = True
    prior_path: list = field(default_factory=list, repr=False)


def importance_weights(source_prior: JointPrior, target_prior: JointPrior) -> np.ndarray:
    """Per-meta-label ratio ``p_t(m) / p_s(m)``."""
    source = as_prior(source_prior).probs
    target = as_prior(target_prior, as_prior(source_prior).space).probs
    bad = (target > 0) & (source < EPS)
    if np.any(bad):
        raise SupportViolationError(
            f"target prior puts mass on meta-labels {np.flatnonzero(bad).tolist()} "
            "that have zero source probability")
    return target / np.maximum(source, EPS)


def reweight_posterior(source_posterior, source_prior: JointPrior, target_prior: JointPrior) -> np.ndarray:
    source_prior = as_prior(source_prior)
    posterior = check_posterior(source_posterior, source_prior.space.size)
    weighted = posterior * importance_weights(source_prior, target_prior)
    totals = weighted.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise DegenerateError(
            f"rows {np.flatnonzero(totals[:, 0] <= 0)[:10].tolist()} have zero mass after reweighting")
    return weighted / totals


def _scaled_likelihoods(posterior, source_probs):
    ratios = np.maximum(posterior, EPS) / np.maximum(source_probs, EPS)
    scale = ratios.max(axis=1, keepdims=True)
    return ratios / scale, np.log(scale[:, 0]).sum()


def _objective(lik, log_scale, pi, alpha):
    value = np.log(lik @ pi).sum() + log_scale
    active = alpha > 1
    if np.any(active):
        value += np.sum((alpha[active] - 1) * np.log(np.maximum(pi[active], EPS)))
    return value


def em_estimate_prior(source_posterior, source_prior: JointPrior, config: EmConfig | None = None) -> EmResult:
    """Estimate the target meta-label prior from unlabeled source posteriors.

    ``source_posterior`` holds calibrated ``p_s(m | x)`` for the unlabeled
    target examples. Starts at the source prior; each M step normalises the
    expected counts plus Dirichlet pseudo-counts ``alpha - 1``. Stops when the
    L1 change in the prior drops below ``config.tolerance``.
    """
    config = config or EmConfig()
    source_prior = as_prior(source_prior)
    n_labels = source_prior.space.size
    posterior = np.asarray(source_posterior, dtype=np.float64)
    if posterior.ndim != 2 or len(posterior) == 0:
        raise InvalidInputError("EM needs at least one unlabeled example")
    posterior = check_posterior(posterior, n_labels)
    alpha = config.alpha_for(n_labels)

    lik, log_scale = _scaled_likelihoods(posterior, source_prior.probs)
    pi = source_prior.probs.copy()
    trace = []
    path = [pi.copy()]
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        mix = lik @ pi
        trace.append(_objective(lik, log_scale, pi, alpha))
        counts = (lik * pi).T @ (1.0 / mix)
        pseudo = counts + alpha - 1
        new_pi = pseudo / pseudo.sum()
        if not np.all(np.isfinite(new_pi)):
            raise NumericalFailureError(f"non-finite prior estimate at EM iteration {iteration}", iteration)
        step = np.abs(new_pi - pi).sum()
        pi = new_pi
        path.append(pi.copy())
        if step < config.tolerance:
            converged = True
            break

    mix = lik @ pi
    trace.append(_objective(lik, log_scale, pi, alpha))
    counts = (lik * pi).T @ (1.0 / mix)
    return EmResult(
        target_prior=JointPrior(source_prior.space, pi),
        iterations=iteration,
        log_likelihood_trace=np.asarray(trace),
        expected_counts=counts,
        converged=converged,
        prior_path=path,
    )


def fix_class_marginal(estimated_prior: JointPrior, source_class_marginal) -> JointPrior:
    """Keep the estimated ``p_t(z | y)`` but impose a given class marginal."""
    estimated_prior = as_prior(estimated_prior)
    space = estimated_prior.space
    marginal = np.asarray(source_class_marginal, dtype=np.float64).reshape(-1)
    if marginal.shape != (space.num_classes,):
        raise InvalidInputError(f"class marginal must have {space.num_classes} entries")
    if np.any(marginal < 0) or abs(marginal.sum() - 1) > 1e-9:
        raise InvalidInputError("class marginal must be a probability vector")
    table = estimated_prior.as_table()
    row_mass = table.sum(axis=1, keepdims=True)
    if np.any(row_mass <= 0):
        raise DegenerateError("estimated prior has a class with zero mass; p(z|y) is undefined")
    return JointPrior(space, (table / row_mass * marginal[:, None]).reshape(-1))


class TestTimeAdapter(TransformerMixin, BaseEstimator):
    """Estimator form of the adaptation step.

    ``fit`` runs EM on source posteriors of unlabeled target examples,
    ``transform`` returns target posteriors and ``predict`` the MAP class.
    """

    __test__ = False

    def __init__(self, source_prior=None, dirichlet_alpha=None, tol=1e-8, max_iter=10_000,
                 fixed_class_marginal=False):
        self.source_prior = source_prior
        self.dirichlet_alpha = dirichlet_alpha
        self.tol = tol
        self.max_iter = max_iter
        self.fixed_class_marginal = fixed_class_marginal

    def fit(self, X, y=None):
        if not isinstance(self.source_prior, JointPrior):
            raise InvalidParameterError("source_prior must be a JointPrior")
        result = em_estimate_prior(
            X, self.source_prior,
            EmConfig(self.dirichlet_alpha, tolerance=self.tol, max_iterations=self.max_iter))
        prior = result.target_prior
        if self.fixed_class_marginal:
            prior = fix_class_marginal(prior, self.source_prior.class_marginal())
        self.em_result_ = result
        self.target_prior_ = prior
        self.n_iter_ = result.iterations
        return self

    def transform(self, X):
        check_is_fitted(self, "target_prior_")
        return reweight_posterior(X, self.source_prior, self.target_prior_)

    def predict_proba(self, X):
        return marginalize_classes(self.transform(X), self.source_prior.space)

    def predict(self, X):
        return predict_class(self.transform(X), self.source_prior.space)
