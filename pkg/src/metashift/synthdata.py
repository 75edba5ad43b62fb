"""Synthetic shift benchmark: anchor priors, the lambda-mixture family, a
Gaussian class/group-conditional feature model and its exact Bayes posterior.

Random draws use numpy's ``PCG64`` bit generator seeded through
``SeedSequence``, so a given integer seed reproduces the same dataset on
every platform numpy supports.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import JointPrior, MetaLabelSpace, as_prior
from .exceptions import InvalidInputError, SpecValidationError


@dataclass(frozen=True)
class AnchorPair:
    p0: JointPrior
    p1: JointPrior

    def __post_init__(self):
        if self.p0.space != self.p1.space:
            raise InvalidInputError("anchors must share a meta-label space")


@dataclass(frozen=True, eq=False)
class GaussianGenerativeSpec:
    space: MetaLabelSpace
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        m, d = means.shape
        if m != self.space.size:
            raise SpecValidationError(f"spec has {m} means, expected {self.space.size}")
        if covs.shape != (m, d, d):
            raise SpecValidationError(f"covariances must have shape {(m, d, d)}, got {covs.shape}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            raise SpecValidationError("spec parameters must be finite")
        if np.max(np.abs(covs - covs.transpose(0, 2, 1)), initial=0.0) > 1e-12:
            raise SpecValidationError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise SpecValidationError("covariances must be positive definite") from exc
        for name, value in (("means", means), ("covariances", covs)):
            value = value.copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        chol.setflags(write=False)
        object.__setattr__(self, "_chol", chol)

    @property
    def n_features(self):
        return self.means.shape[1]

    @property
    def cholesky(self):
        return self._chol

    def to_dict(self):
        return {
            "num_classes": self.space.num_classes,
            "num_groups": self.space.num_groups,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            space = MetaLabelSpace(int(data["num_classes"]), int(data["num_groups"]))
            return cls(space, np.asarray(data["means"]), np.asarray(data["covariances"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecValidationError):
                raise
            raise SpecValidationError(f"malformed generative spec: {exc}") from exc


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    y: np.ndarray
    z: np.ndarray
    space: MetaLabelSpace
    prior: JointPrior | None = None
    seed: object = None

    def __post_init__(self):
        n = len(self.features)
        if len(self.y) != n or len(self.z) != n:
            raise InvalidInputError("features, y and z must have equal length")

    def __len__(self):
        return len(self.features)

    @property
    def meta_labels(self):
        return self.y * self.space.num_groups + self.z


def gauss_cmnist_spec(class_shift=1.0, group_shift=3.0) -> GaussianGenerativeSpec:
    """Two features: a weak class direction and a strong group direction,
    so the group acts as an easy shortcut for the class when correlated."""
    space = MetaLabelSpace(2, 2)
    means = []
    for m in range(space.size):
        y, z = space.decode(m)
        means.append([class_shift * (2 * y - 1), group_shift * (2 * z - 1)])
    return GaussianGenerativeSpec(space, np.array(means), np.tile(np.eye(2), (4, 1, 1)))


BUILTIN_SPECS = {"gauss-cmnist": gauss_cmnist_spec}


def load_spec(name_or_path) -> GaussianGenerativeSpec:
    if name_or_path in BUILTIN_SPECS:
        return BUILTIN_SPECS[name_or_path]()
    try:
        with open(name_or_path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecValidationError(f"cannot read generative spec {name_or_path!r}: {exc}") from exc
    return GaussianGenerativeSpec.from_dict(data)


def default_anchors() -> AnchorPair:
    space = MetaLabelSpace(2, 2)
    return AnchorPair(
        JointPrior(space, [0.5, 0.0, 0.0, 0.5]),
        JointPrior(space, [0.0, 0.5, 0.5, 0.0]),
    )


def lambda_prior(anchors: AnchorPair, lam: float) -> JointPrior:
    """``(1 - lam) * p0 + lam * p1``."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    probs = (1.0 - lam) * anchors.p0.probs + lam * anchors.p1.probs
    return JointPrior(anchors.p0.space, probs)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


def sample_dataset(prior: JointPrior, spec: GaussianGenerativeSpec, n: int, seed) -> LabeledDataset:
    prior = as_prior(prior, spec.space)
    if int(n) != n or n < 0:
        raise InvalidInputError(f"n must be a nonnegative integer, got {n!r}")
    rng = make_rng(seed)
    meta = rng.choice(spec.space.size, size=int(n), p=prior.probs)
    noise = rng.standard_normal((int(n), spec.n_features))
    features = spec.means[meta] + np.einsum("nij,nj->ni", spec.cholesky[meta], noise)
    y, z = np.divmod(meta, spec.space.num_groups)
    return LabeledDataset(features, y, z, spec.space, prior, seed)


def log_likelihoods(features, spec: GaussianGenerativeSpec) -> np.ndarray:
    """``log N(x_i; mu_m, Sigma_m)`` for every row and meta-label."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != spec.n_features:
        raise InvalidInputError(f"expected {spec.n_features} feature columns, found {x.shape[1]}")
    d = spec.n_features
    out = np.empty((len(x), spec.space.size))
    for m in range(spec.space.size):
        chol = spec.cholesky[m]
        diff = (x - spec.means[m]).T
        sol = np.linalg.solve(chol, diff) if len(x) else diff
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        out[:, m] = -0.5 * (np.sum(sol * sol, axis=0) + log_det + d * np.log(2 * np.pi))
    return out


def oracle_posterior(features, spec: GaussianGenerativeSpec, prior: JointPrior) -> np.ndarray:
    """Exact Bayes posterior over meta-labels under ``spec`` and ``prior``."""
    prior = as_prior(prior, spec.space)
    with np.errstate(divide="ignore"):
        log_joint = log_likelihoods(features, spec) + np.log(prior.probs)
    log_joint -= log_joint.max(axis=1, keepdims=True)
    post = np.exp(log_joint)
    return post / post.sum(axis=1, keepdims=True)
