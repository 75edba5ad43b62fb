"""Meta-label indexing, priors and stable softmax primitives.

A meta-label ``m`` is the pair ``(y, z)`` of class and nuisance group,
flattened row-major by class: ``m = y * K + z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError

EPS = 1e-12


@dataclass(frozen=True)
class MetaLabelSpace:
    num_classes: int
    num_groups: int

    def __post_init__(self):
        for name in ("num_classes", "num_groups"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")

    @property
    def size(self) -> int:
        return self.num_classes * self.num_groups

    def encode(self, y, z):
        y = np.asarray(y)
        z = np.asarray(z)
        if np.any((y < 0) | (y >= self.num_classes)) or np.any((z < 0) | (z >= self.num_groups)):
            raise InvalidInputError("class or group index out of range")
        m = y * self.num_groups + z
        return int(m) if m.ndim == 0 else m

    def decode(self, m):
        m = np.asarray(m)
        if np.any((m < 0) | (m >= self.size)):
            raise InvalidInputError(f"meta-label out of range [0, {self.size})")
        y, z = np.divmod(m, self.num_groups)
        if m.ndim == 0:
            return int(y), int(z)
        return y, z


@dataclass(frozen=True)
class JointPrior:
    """Probability vector over the meta-labels of ``space``."""

    space: MetaLabelSpace
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if probs.shape != (self.space.size,):
            raise InvalidInputError(
                f"prior has {probs.size} entries, expected {self.space.size} "
                f"(C={self.space.num_classes}, K={self.space.num_groups})"
            )
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidInputError("prior entries must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"prior sums to {probs.sum()!r}, expected 1")
        probs = probs / probs.sum()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, space):
        return cls(space, np.full(space.size, 1.0 / space.size))

    @classmethod
    def from_counts(cls, space, meta_labels):
        counts = np.bincount(np.asarray(meta_labels, dtype=np.int64), minlength=space.size)
        if counts.sum() == 0:
            raise InvalidInputError("cannot estimate a prior from zero labels")
        return cls(space, counts / counts.sum())

    def as_table(self):
        """View as a ``C x K`` table indexed ``[y, z]``."""
        return self.probs.reshape(self.space.num_classes, self.space.num_groups)

    def class_marginal(self):
        return self.as_table().sum(axis=1)

    def group_marginal(self):
        return self.as_table().sum(axis=0)

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, JointPrior):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash((self.space, self.probs.tobytes()))


def as_prior(prior, space=None) -> JointPrior:
    if isinstance(prior, JointPrior):
        if space is not None and prior.space != space:
            raise InvalidInputError("prior is defined over a different meta-label space")
        return prior
    if space is None:
        raise InvalidInputError("a MetaLabelSpace is required to interpret a raw prior vector")
    return JointPrior(space, prior)


def check_logits(logits, n_columns=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    if logits.ndim != 2:
        raise InvalidInputError(f"expected a 2-D logits matrix, got shape {logits.shape}")
    if n_columns is not None and logits.shape[1] != n_columns:
        raise InvalidInputError(f"expected {n_columns} logit columns, found {logits.shape[1]}")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits contain NaN or infinite entries")
    return logits


def check_posterior(posterior, n_columns=None, atol=1e-9) -> np.ndarray:
    posterior = np.asarray(posterior, dtype=np.float64)
    if posterior.ndim == 1:
        posterior = posterior[None, :]
    if posterior.ndim != 2:
        raise InvalidInputError(f"expected a 2-D posterior matrix, got shape {posterior.shape}")
    if n_columns is not None and posterior.shape[1] != n_columns:
        raise InvalidInputError(f"expected {n_columns} posterior columns, found {posterior.shape[1]}")
    if not np.all(np.isfinite(posterior)):
        raise InvalidInputError("posterior contains NaN or infinite entries")
    if np.any(posterior < -atol) or np.any(posterior > 1 + atol):
        raise InvalidInputError("posterior entries must lie in [0, 1]")
    if posterior.size and np.max(np.abs(posterior.sum(axis=1) - 1.0)) > atol:
        raise InvalidInputError("posterior rows must sum to 1")
    return posterior


def log_softmax_rows(logits) -> np.ndarray:
    logits = check_logits(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    logits = check_logits(logits)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def marginalize_classes(posterior, space: MetaLabelSpace) -> np.ndarray:
    """Sum meta-label probabilities over groups, giving an ``N x C`` matrix."""
    posterior = check_posterior(posterior, space.size)
    return posterior.reshape(len(posterior), space.num_classes, space.num_groups).sum(axis=2)


def predict_class(posterior, space: MetaLabelSpace) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(marginalize_classes(posterior, space), axis=1)
