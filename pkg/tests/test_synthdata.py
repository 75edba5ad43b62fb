import json

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from metashift.core import JointPrior, MetaLabelSpace
from metashift.exceptions import InvalidInputError, SpecValidationError
from metashift.synthdata import (
    GaussianGenerativeSpec,
    default_anchors,
    gauss_cmnist_spec,
    lambda_prior,
    load_spec,
    log_likelihoods,
    oracle_posterior,
    sample_dataset,
)

SPACE = MetaLabelSpace(2, 2)


def test_default_anchors():
    anchors = default_anchors()
    np.testing.assert_array_equal(anchors.p0.probs, [0.5, 0.0, 0.0, 0.5])
    np.testing.assert_array_equal(anchors.p1.probs, [0.0, 0.5, 0.5, 0.0])


@pytest.mark.parametrize("lam, expected", [
    (0.0, [0.5, 0.0, 0.0, 0.5]),
    (1.0, [0.0, 0.5, 0.5, 0.0]),
    (0.5, [0.25, 0.25, 0.25, 0.25]),
    (0.1, [0.45, 0.05, 0.05, 0.45]),
])
def test_lambda_prior_examples(lam, expected):
    np.testing.assert_allclose(lambda_prior(default_anchors(), lam).probs, expected, atol=1e-15)


def test_lambda_prior_is_affine_on_the_grid():
    anchors = default_anchors()
    for lam in np.linspace(0, 1, 21):
        p = lambda_prior(anchors, lam).probs
        np.testing.assert_allclose(p, (1 - lam) * anchors.p0.probs + lam * anchors.p1.probs, atol=1e-15)
        assert abs(p.sum() - 1) < 1e-12


@pytest.mark.parametrize("lam", [-0.1, 1.5, np.nan])
def test_lambda_out_of_range(lam):
    with pytest.raises(InvalidInputError):
        lambda_prior(default_anchors(), lam)


def test_sample_zero_rows():
    data = sample_dataset(JointPrior.uniform(SPACE), gauss_cmnist_spec(), 0, seed=0)
    assert data.features.shape == (0, 2)
    assert len(data.y) == len(data.z) == 0


def test_one_hot_prior_samples_one_meta_label():
    prior = JointPrior(SPACE, [0, 0, 1, 0])
    data = sample_dataset(prior, gauss_cmnist_spec(), 500, seed=1)
    assert np.all(data.y == 1) and np.all(data.z == 0)
    np.testing.assert_allclose(data.features.mean(axis=0), [1.0, -3.0], atol=0.15)


def test_empirical_frequencies_track_the_prior():
    prior = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    data = sample_dataset(prior, gauss_cmnist_spec(), 100_000, seed=2)
    freq = np.bincount(data.meta_labels, minlength=4) / 100_000
    assert np.abs(freq - prior.probs).max() < 0.01


def test_sampling_is_deterministic_in_the_seed():
    prior = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    a = sample_dataset(prior, gauss_cmnist_spec(), 50, seed=[3, 1, 4])
    b = sample_dataset(prior, gauss_cmnist_spec(), 50, seed=[3, 1, 4])
    c = sample_dataset(prior, gauss_cmnist_spec(), 50, seed=[3, 1, 5])
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_per_group_means_do_not_depend_on_the_prior():
    spec = gauss_cmnist_spec()
    a = sample_dataset(JointPrior(SPACE, [0.45, 0.05, 0.05, 0.45]), spec, 40_000, seed=5)
    b = sample_dataset(JointPrior(SPACE, [0.05, 0.45, 0.45, 0.05]), spec, 40_000, seed=6)
    for m in range(4):
        np.testing.assert_allclose(a.features[a.meta_labels == m].mean(axis=0),
                                   b.features[b.meta_labels == m].mean(axis=0), atol=0.08)


def test_log_likelihoods_match_scipy():
    spec = GaussianGenerativeSpec(SPACE, np.array([[0, 0], [1, 0], [0, 1], [2, 2.0]]),
                                  np.array([np.eye(2), [[2, 0.5], [0.5, 1]], np.eye(2) * 0.3, [[1, -0.4], [-0.4, 3]]]))
    x = np.random.default_rng(4).normal(size=(25, 2))
    expected = np.column_stack([multivariate_normal(spec.means[m], spec.covariances[m]).logpdf(x) for m in range(4)])
    np.testing.assert_allclose(log_likelihoods(x, spec), expected, rtol=1e-12)


def test_oracle_posterior_examples():
    spec = gauss_cmnist_spec()
    uniform = JointPrior.uniform(SPACE)
    # equidistant from every mean
    np.testing.assert_allclose(oracle_posterior([[0.0, 0.0]], spec, uniform), [[0.25] * 4], atol=1e-15)
    # a one-hot prior pins the posterior
    np.testing.assert_allclose(oracle_posterior([[5.0, 5.0]], spec, JointPrior(SPACE, [1, 0, 0, 0])),
                               [[1, 0, 0, 0]], atol=1e-15)
    # hand: x = (1, 3) sits on the (y=1, z=1) mean; squared distances to m = 0, 1, 2 are 40, 4, 36
    hand = np.exp(-0.5 * np.array([40.0, 4.0, 36.0, 0.0]))
    np.testing.assert_allclose(oracle_posterior([[1.0, 3.0]], spec, uniform)[0], hand / hand.sum(), rtol=1e-12)


def test_label_shift_identity_for_the_oracle():
    spec = gauss_cmnist_spec()
    source = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    target = JointPrior(SPACE, [0.4, 0.05, 0.05, 0.5])
    x = np.random.default_rng(8).normal(size=(30, 2)) * 3
    via_source = oracle_posterior(x, spec, source) * (target.probs / source.probs)
    via_source /= via_source.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(via_source, oracle_posterior(x, spec, target), atol=1e-12)


def test_spec_validation():
    means = np.zeros((4, 2))
    with pytest.raises(SpecValidationError):
        GaussianGenerativeSpec(SPACE, means[:3], np.tile(np.eye(2), (3, 1, 1)))
    with pytest.raises(SpecValidationError):
        GaussianGenerativeSpec(SPACE, means, np.tile([[1.0, 0.5], [0.0, 1.0]], (4, 1, 1)))
    with pytest.raises(SpecValidationError):
        GaussianGenerativeSpec(SPACE, means, np.tile(-np.eye(2), (4, 1, 1)))


def test_spec_json_round_trip(tmp_path):
    spec = gauss_cmnist_spec(class_shift=0.5)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    loaded = load_spec(str(path))
    np.testing.assert_array_equal(loaded.means, spec.means)
    np.testing.assert_array_equal(loaded.covariances, spec.covariances)
    np.testing.assert_array_equal(load_spec("gauss-cmnist").means, gauss_cmnist_spec().means)
    with pytest.raises(SpecValidationError):
        load_spec(str(tmp_path / "missing.json"))
