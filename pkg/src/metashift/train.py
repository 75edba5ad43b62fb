"""Linear softmax classifiers over the meta-label space.

Two training modes share one model:

``erm``
    cross-entropy on ``softmax(g(x))``; ``g`` estimates ``log p_s(m | x)``.
``logit_adjusted``
    cross-entropy on ``softmax(g(x) + log p_s(m))``; ``g`` then estimates the
    balanced posterior and the source posterior is recovered by adding the
    log prior back.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._optim import AdamW, EmaEarlyStopping
from .core import EPS, JointPrior, MetaLabelSpace, as_prior, check_logits, log_softmax_rows, softmax_rows
from .exceptions import InvalidInputError, InvalidParameterError, SupportViolationError

MODES = ("erm", "logit_adjusted")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 5000
    ema_decay: float = 0.1
    patience: int = 5
    l2: float = 0.0
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidParameterError("batch_size, max_epochs and patience must be positive")
        if not 0 < self.ema_decay < 1:
            raise InvalidParameterError("ema_decay must lie in (0, 1)")
        if self.l2 < 0:
            raise InvalidParameterError("l2 must be nonnegative")
        if not 0 <= self.validation_fraction < 1:
            raise InvalidParameterError("validation_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class LinearSoftmaxModel:
    space: MetaLabelSpace
    weights: np.ndarray
    bias: np.ndarray
    mode: str
    training_prior: JointPrior
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    loss_history: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if weights.shape[0] != self.space.size or bias.shape != (self.space.size,):
            raise InvalidInputError("weights/bias do not match the meta-label space")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise InvalidInputError("model parameters must be finite")
        for name, value in (("weights", weights), ("bias", bias),
                            ("feature_mean", np.asarray(self.feature_mean, dtype=np.float64)),
                            ("feature_scale", np.asarray(self.feature_scale, dtype=np.float64))):
            value = value.copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_features(self):
        return self.weights.shape[1]

    def balanced_logits(self, features):
        """``g(x)``: source logits for ``erm``, balanced logits for ``logit_adjusted``."""
        x = _check_features(features, self.n_features)
        return ((x - self.feature_mean) / self.feature_scale) @ self.weights.T + self.bias


def _check_features(features, n_features=None):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidInputError(f"features must be a 2-D matrix, got shape {x.shape}")
    if n_features is not None and x.shape[1] != n_features:
        raise InvalidInputError(f"expected {n_features} feature columns, found {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features contain NaN or infinite entries")
    return x


def _training_adjustment(mode, prior: JointPrior):
    if mode == "erm":
        return np.zeros(prior.space.size)
    log_prior = np.log(np.maximum(prior.probs, EPS))
    # a constant shift is invisible to softmax; centring makes a uniform prior an exact no-op
    return log_prior - log_prior.mean()


def softmax_loss_and_grad(weights, bias, x, labels, adjustment, l2=0.0):
    """Mean cross-entropy of ``softmax(x W^T + b + adjustment)`` and its
    gradients with respect to ``W`` and ``b``."""
    n = len(labels)
    logits = x @ weights.T + bias + adjustment
    log_p = log_softmax_rows(logits)
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    resid = np.exp(log_p)
    resid[rows, labels] -= 1.0
    resid /= n
    grad_w = resid.T @ x
    grad_b = resid.sum(axis=0)
    if l2:
        loss += 0.5 * l2 * np.sum(weights * weights)
        grad_w = grad_w + l2 * weights
    return loss, grad_w, grad_b


def train_softmax(features, meta_labels, mode: str, config: TrainConfig | None = None,
                  prior: JointPrior | None = None, space: MetaLabelSpace | None = None) -> LinearSoftmaxModel:
    """Fit a linear softmax model by minibatch AdamW with EMA early stopping
    on a held-out validation split.

    ``prior`` defaults to the empirical meta-label frequencies; it is what
    logit adjustment subtracts and what :func:`predict_logits` adds back.
    """
    config = config or TrainConfig()
    if mode not in MODES:
        raise InvalidParameterError(f"mode must be one of {MODES}, got {mode!r}")
    x = _check_features(features)
    labels = np.asarray(meta_labels, dtype=np.int64).reshape(-1)
    if len(x) == 0:
        raise InvalidInputError("cannot train on zero examples")
    if len(labels) != len(x):
        raise InvalidInputError(f"{len(labels)} labels for {len(x)} feature rows")
    if space is None:
        space = prior.space if prior is not None else None
    if space is None:
        raise InvalidInputError("a MetaLabelSpace (or prior) is required")
    if np.any((labels < 0) | (labels >= space.size)):
        raise InvalidInputError(f"meta-labels must lie in [0, {space.size})")
    prior = as_prior(prior, space) if prior is not None else JointPrior.from_counts(space, labels)
    if mode == "logit_adjusted":
        observed = np.unique(labels)
        if np.any(prior.probs[observed] <= 0):
            raise SupportViolationError("training prior is zero on an observed meta-label")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(round(config.validation_fraction * len(x)))
    if n_val >= len(x):
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    mean = x[train_idx].mean(axis=0)
    scale = x[train_idx].std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - mean) / scale
    x_train, y_train = xs[train_idx], labels[train_idx]
    x_val, y_val = (xs[val_idx], labels[val_idx]) if n_val else (x_train, y_train)

    n_labels, n_features = space.size, x.shape[1]
    adjustment = _training_adjustment(mode, prior)
    decay_mask = np.concatenate([np.ones(n_labels * n_features), np.zeros(n_labels)])
    opt = AdamW(np.zeros(n_labels * n_features + n_labels), lr=config.learning_rate,
                weight_decay=config.l2, decay_mask=decay_mask)
    stopper = EmaEarlyStopping(config.ema_decay, config.patience)

    def unpack(params):
        return params[:n_labels * n_features].reshape(n_labels, n_features), params[n_labels * n_features:]

    w, b = unpack(opt.params)
    stopper.update(softmax_loss_and_grad(w, b, x_val, y_val, adjustment)[0])
    batch = min(config.batch_size, len(x_train))
    for _ in range(config.max_epochs):
        perm = rng.permutation(len(x_train))
        for start in range(0, len(x_train), batch):
            idx = perm[start:start + batch]
            w, b = unpack(opt.params)
            _, g_w, g_b = softmax_loss_and_grad(w, b, x_train[idx], y_train[idx], adjustment)
            opt.step(np.concatenate([g_w.ravel(), g_b]))
        w, b = unpack(opt.params)
        val_loss = softmax_loss_and_grad(w, b, x_val, y_val, adjustment)[0]
        if stopper.update(val_loss):
            break

    w, b = unpack(opt.params)
    return LinearSoftmaxModel(space, w.copy(), b.copy(), mode, prior, mean, scale,
                              tuple(stopper.history))


def predict_logits(model: LinearSoftmaxModel, features) -> np.ndarray:
    """Logits of the source posterior ``p_s(m | x)`` for either training mode."""
    g = model.balanced_logits(features)
    if model.mode == "logit_adjusted":
        g = g + np.log(np.maximum(model.training_prior.probs, EPS))
    return g


def subsample_balanced(features, meta_labels, seed, num_labels=None):
    """Subsample every nonempty meta-label group down to the smallest group's size.

    Empty groups are skipped with a ``UserWarning``. Selected rows keep their
    original relative order.
    """
    x = np.asarray(features)
    labels = np.asarray(meta_labels, dtype=np.int64).reshape(-1)
    if len(x) != len(labels):
        raise InvalidInputError(f"{len(labels)} labels for {len(x)} feature rows")
    if len(labels) == 0:
        raise InvalidInputError("all groups are empty")
    num_labels = int(labels.max()) + 1 if num_labels is None else num_labels
    counts = np.bincount(labels, minlength=num_labels)
    nonempty = np.flatnonzero(counts)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        warnings.warn(f"skipping empty meta-label groups {empty.tolist()} during balanced subsampling",
                      UserWarning, stacklevel=2)
    target = counts[nonempty].min()
    rng = np.random.default_rng(seed)
    keep = [rng.choice(np.flatnonzero(labels == m), size=target, replace=False) for m in nonempty]
    keep = np.sort(np.concatenate(keep))
    return x[keep], labels[keep]


def adjust_nonuniform_marginals(logits, prior: JointPrior) -> np.ndarray:
    """Subtract ``log(p(y, z) / (p(y) p(z)))`` from each meta-label logit."""
    prior = as_prior(prior)
    logits = check_logits(logits, prior.space.size)
    if np.any(prior.probs <= 0):
        raise SupportViolationError("prior has zero cells; the correlation offset is undefined")
    product = np.outer(prior.class_marginal(), prior.group_marginal()).reshape(-1)
    return logits - np.log(prior.probs / product)


class MetaLabelClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`train_softmax`.

    ``fit(X, m)`` takes flattened meta-labels. ``predict_proba`` returns the
    source posterior over meta-labels and ``predict_balanced_proba`` the
    balanced one.
    """

    def __init__(self, num_classes=2, num_groups=2, mode="erm", learning_rate=1e-3, batch_size=64,
                 max_epochs=5000, ema_decay=0.1, patience=5, l2=0.0, random_state=0):
        self.num_classes = num_classes
        self.num_groups = num_groups
        self.mode = mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.ema_decay = ema_decay
        self.patience = patience
        self.l2 = l2
        self.random_state = random_state

    def fit(self, X, y, prior=None):
        X = check_array(X, dtype=np.float64)
        space = MetaLabelSpace(self.num_classes, self.num_groups)
        config = TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.ema_decay,
                             self.patience, self.l2, self.random_state)
        self.model_ = train_softmax(X, y, self.mode, config, prior=prior, space=space)
        self.classes_ = np.arange(space.size)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict_balanced_proba(self, X):
        check_is_fitted(self, "model_")
        logits = self.model_.balanced_logits(check_array(X, dtype=np.float64))
        if self.model_.mode == "erm":
            logits = logits - np.log(np.maximum(self.model_.training_prior.probs, EPS))
        return softmax_rows(logits)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)
