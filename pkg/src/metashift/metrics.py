"""AUC, per-group accuracy and prior summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .core import JointPrior, MetaLabelSpace, as_prior
from .exceptions import InvalidInputError, UndefinedMetricError


@dataclass(frozen=True, eq=False)
class GroupAccuracyReport:
    per_group: np.ndarray
    counts: np.ndarray
    worst: float
    average: float
    weighted_average: float


@dataclass(frozen=True)
class SweepRecord:
    lam: float
    method: str
    seed: int
    auc: float
    target_prior_estimate: JointPrior | None = None

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise InvalidInputError(f"AUC must lie in [0, 1], got {self.auc}")


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties: the probability that a random
    positive outscores a random negative, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(scores) != len(labels):
        raise InvalidInputError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidInputError("labels must be binary 0/1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative example")
    ranks = rankdata(scores, method="average")
    # rank sums of half-integers are exact in binary floating point
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def group_accuracy(predicted_classes, y, z, space: MetaLabelSpace | None = None) -> GroupAccuracyReport:
    predicted = np.asarray(predicted_classes).reshape(-1)
    y = np.asarray(y).reshape(-1)
    z = np.asarray(z).reshape(-1)
    if not (len(predicted) == len(y) == len(z)):
        raise InvalidInputError("predictions, y and z must have equal length")
    if space is None:
        space = MetaLabelSpace(int(max(y.max(initial=0), predicted.max(initial=0))) + 1,
                               int(z.max(initial=0)) + 1)
    meta = space.encode(y, z) if len(y) else np.zeros(0, dtype=np.int64)
    correct = (predicted == y).astype(np.float64)
    counts = np.bincount(meta, minlength=space.size)
    hits = np.bincount(meta, weights=correct, minlength=space.size)
    nonempty = counts > 0
    if not np.any(nonempty):
        raise InvalidInputError("no examples to score")
    per_group = np.full(space.size, np.nan)
    per_group[nonempty] = hits[nonempty] / counts[nonempty]
    return GroupAccuracyReport(
        per_group=per_group,
        counts=counts,
        worst=float(per_group[nonempty].min()),
        average=float(per_group[nonempty].mean()),
        weighted_average=float(correct.mean()),
    )


def max_group_prob(prior: JointPrior) -> float:
    return float(as_prior(prior).probs.max())
