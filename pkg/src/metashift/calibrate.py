"""Bias-corrected temperature scaling (BCTS).

Calibrated posteriors are ``softmax(logits / T + b)``. The temperature is
optimised as ``u = log T`` so no positivity projection is needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._optim import AdamW, EmaEarlyStopping
from .core import EPS, check_logits, log_softmax_rows, softmax_rows
from .exceptions import InsufficientDataError, InvalidInputError, InvalidParameterError


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    temperature: float
    bias: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise InvalidParameterError(f"temperature must be positive, got {self.temperature!r}")
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(bias)):
            raise InvalidParameterError("bias must be finite")
        object.__setattr__(self, "bias", bias)

    @classmethod
    def identity(cls, n_labels):
        return cls(1.0, np.zeros(n_labels))

    def centered(self):
        return CalibrationParams(self.temperature, self.bias - self.bias.mean())

    def to_dict(self):
        return {"temperature": float(self.temperature), "bias": [float(b) for b in self.bias]}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["temperature"]), np.asarray(data["bias"], dtype=np.float64))


@dataclass(frozen=True)
class CalibrationFitConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    ema_decay: float = 0.1
    patience: int = 5
    holdout_fraction: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be positive")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise InvalidParameterError("max_epochs, patience and batch_size must be positive")
        if not 0 < self.ema_decay < 1 or not 0 < self.holdout_fraction < 1:
            raise InvalidParameterError("ema_decay and holdout_fraction must lie in (0, 1)")


def apply_bcts(logits, params: CalibrationParams) -> np.ndarray:
    logits = check_logits(logits, len(params.bias))
    if not params.temperature > 0:
        raise InvalidParameterError("temperature must be positive")
    return softmax_rows(logits / params.temperature + params.bias)


def _check_labels(meta_labels, n_rows, n_labels):
    labels = np.asarray(meta_labels)
    if labels.ndim != 1 or len(labels) != n_rows:
        raise InvalidInputError(f"got {len(labels)} labels for {n_rows} rows")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise InvalidInputError("meta-labels must be integers")
    labels = labels.astype(np.int64)
    if np.any((labels < 0) | (labels >= n_labels)):
        raise InvalidInputError(f"meta-labels must lie in [0, {n_labels})")
    return labels


def negative_log_likelihood(posterior, meta_labels) -> float:
    posterior = np.asarray(posterior, dtype=np.float64)
    labels = _check_labels(meta_labels, len(posterior), posterior.shape[1])
    picked = posterior[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, EPS))))


def bcts_nll_and_grad(logits, labels, log_temperature, bias):
    """Mean NLL and its gradient w.r.t. ``(log T, b)``."""
    scale = np.exp(-log_temperature)
    z = logits * scale + bias
    log_p = log_softmax_rows(z)
    n = len(labels)
    rows = np.arange(n)
    nll = -log_p[rows, labels].mean()
    resid = np.exp(log_p)
    resid[rows, labels] -= 1.0
    resid /= n
    grad_bias = resid.sum(axis=0)
    grad_u = -np.sum(resid * logits) * scale
    return nll, grad_u, grad_bias


def fit_bcts(logits, meta_labels, config: CalibrationFitConfig | None = None) -> CalibrationParams:
    """Fit temperature and per-label bias by minimising NLL on labelled logits.

    Minibatch AdamW starting from ``T=1, b=0``, with EMA early stopping on the
    full-set NLL evaluated after each epoch. The best epoch's parameters are
    returned, so the result never scores worse than the identity map.
    """
    config = config or CalibrationFitConfig()
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise InvalidInputError("logits must be a 2-D matrix")
    n, n_labels = logits.shape
    if n < n_labels:
        raise InsufficientDataError(f"need at least {n_labels} calibration rows, got {n}")
    logits = check_logits(logits)
    labels = _check_labels(meta_labels, n, n_labels)

    opt = AdamW(np.zeros(1 + n_labels), lr=config.learning_rate)
    stopper = EmaEarlyStopping(config.ema_decay, config.patience)
    rng = np.random.default_rng(config.seed)

    best_nll = bcts_nll_and_grad(logits, labels, 0.0, np.zeros(n_labels))[0]
    best = opt.params.copy()
    stopper.update(best_nll)
    batch = min(config.batch_size, n)
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, g_u, g_b = bcts_nll_and_grad(logits[idx], labels[idx], opt.params[0], opt.params[1:])
            opt.step(np.concatenate(([g_u], g_b)))
        nll = bcts_nll_and_grad(logits, labels, opt.params[0], opt.params[1:])[0]
        if not np.isfinite(nll):
            break
        if nll < best_nll:
            best_nll, best = nll, opt.params.copy()
        if stopper.update(nll):
            break
    return CalibrationParams(float(np.exp(best[0])), best[1:]).centered()


class BCTSCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(logits, meta_labels)`` then ``transform(logits)``
    returns calibrated posteriors."""

    def __init__(self, learning_rate=1e-3, max_epochs=1000, ema_decay=0.1, patience=5,
                 batch_size=64, random_state=0):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.ema_decay = ema_decay
        self.patience = patience
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        config = CalibrationFitConfig(
            learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            ema_decay=self.ema_decay, patience=self.patience,
            batch_size=self.batch_size, seed=self.random_state,
        )
        self.params_ = fit_bcts(X, y, config)
        self.temperature_ = self.params_.temperature
        self.bias_ = self.params_.bias
        self.n_features_in_ = len(self.bias_)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return apply_bcts(X, self.params_)
