import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from metashift.adapt import (
    EmConfig,
    TestTimeAdapter,
    em_estimate_prior,
    fix_class_marginal,
    importance_weights,
    reweight_posterior,
)
from metashift.core import JointPrior, MetaLabelSpace, marginalize_classes
from metashift.exceptions import (
    DegenerateError,
    InvalidInputError,
    InvalidParameterError,
    SupportViolationError,
)
from metashift.synthdata import gauss_cmnist_spec, oracle_posterior, sample_dataset

from oracles import em_objective, grid_search_prior, random_posteriors

SPACE = MetaLabelSpace(2, 2)
UNIFORM = JointPrior.uniform(SPACE)


def space_for(m):
    return MetaLabelSpace(1, m)


def random_prior(rng, m):
    return JointPrior(space_for(m), rng.dirichlet(np.ones(m)) * 0.9 + 0.1 / m)


# importance weights / reweighting ---------------------------------------------

def test_weights_identity():
    prior = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(importance_weights(prior, prior), np.ones(4))


def test_weights_division():
    target = JointPrior(SPACE, [0.4, 0.1, 0.4, 0.1])
    np.testing.assert_allclose(importance_weights(UNIFORM, target), [1.6, 0.4, 1.6, 0.4], rtol=1e-15)


def test_weights_support_violation():
    source = JointPrior(SPACE, [0.5, 0.5, 0.0, 0.0])
    target = JointPrior(SPACE, [0.4, 0.4, 0.1, 0.1])
    with pytest.raises(SupportViolationError):
        importance_weights(source, target)


def test_reweight_identity_exact():
    post = random_posteriors(np.random.default_rng(0), 50, 4)
    prior = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(reweight_posterior(post, prior, prior), post, atol=1e-12, rtol=0)


def test_reweight_uniform_row_becomes_target():
    target = JointPrior(SPACE, [0.4, 0.1, 0.4, 0.1])
    out = reweight_posterior([[0.25] * 4], UNIFORM, target)
    np.testing.assert_allclose(out, [target.probs], atol=1e-15)


def test_reweight_hand_example():
    target = JointPrior(SPACE, [0.8, 0.2 / 3, 0.2 / 3, 0.2 / 3])
    # hand: w = [3.2, 4/15, 4/15, 4/15]; 0.5*3.2 = 1.6, 0.5*4/15 = 2/15, total 26/15
    expected = [12 / 13, 1 / 13, 0.0, 0.0]
    # exhaustive Bayes oracle: p_t(m|x) = p_s(m|x) p_t(m)/p_s(m), normalised
    row, ps, pt = [0.5, 0.5, 0, 0], [0.25] * 4, target.probs
    unnorm = [row[m] * pt[m] / ps[m] for m in range(4)]
    oracle = [u / sum(unnorm) for u in unnorm]
    np.testing.assert_allclose(oracle, expected, atol=1e-15)
    np.testing.assert_allclose(reweight_posterior([row], UNIFORM, target)[0], expected, atol=1e-15)


def test_reweight_degenerate_row():
    target = JointPrior(SPACE, [0.5, 0.5, 0.0, 0.0])
    with pytest.raises(DegenerateError):
        reweight_posterior([[0.0, 0.0, 1.0, 0.0]], UNIFORM, target)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_prediction_invariant_to_target_scale(seed, scale):
    rng = np.random.default_rng(seed)
    post = random_posteriors(rng, 20, 4)
    source = JointPrior(SPACE, rng.dirichlet(np.ones(4)) * 0.9 + 0.025)
    target = JointPrior(SPACE, rng.dirichlet(np.ones(4)))
    adapted = reweight_posterior(post, source, target)
    # unnormalised target: scale the weights, renormalise rows by hand
    scaled = post * (scale * target.probs / source.probs)
    scaled /= scaled.sum(axis=1, keepdims=True)
    np.testing.assert_array_equal(marginalize_classes(adapted, SPACE).argmax(1),
                                  marginalize_classes(scaled, SPACE).argmax(1))


# EM ---------------------------------------------------------------------------

def test_em_uninformative_returns_source_prior():
    source = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    result = em_estimate_prior(np.tile(source.probs, (25, 1)), source)
    np.testing.assert_allclose(result.target_prior.probs, source.probs, atol=1e-15)
    assert result.converged
    assert result.iterations == 1


def test_em_two_labels_matches_grid_search():
    post = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
    source = JointPrior(space_for(2), [0.5, 0.5])
    result = em_estimate_prior(post, source)
    grid = np.linspace(0, 1, 10001)
    objective = [np.log(p * 2 * post[:, 0] + (1 - p) * 2 * post[:, 1]).sum() for p in grid]
    best = grid[int(np.argmax(objective))]
    assert best == 1.0  # all rows favour label 0 strongly enough that the optimum sits on the boundary
    assert abs(result.target_prior.probs[0] - best) < 1e-3


def test_em_consistency_on_gaussian_model():
    spec = gauss_cmnist_spec()
    truth = JointPrior(SPACE, [0.1, 0.4, 0.4, 0.1])
    data = sample_dataset(truth, spec, 10_000, seed=2024)
    post = oracle_posterior(data.features, spec, UNIFORM)
    result = em_estimate_prior(post, UNIFORM)
    assert np.abs(result.target_prior.probs - truth.probs).sum() < 0.02


def test_em_empty_input():
    with pytest.raises(InvalidInputError):
        em_estimate_prior(np.zeros((0, 4)), UNIFORM)


def test_em_config_validation():
    with pytest.raises(InvalidParameterError):
        EmConfig(dirichlet_alpha=[0.5, 1, 1, 1])
    with pytest.raises(InvalidParameterError):
        EmConfig(tolerance=0)
    with pytest.raises(InvalidParameterError):
        em_estimate_prior(np.full((3, 4), 0.25), UNIFORM, EmConfig(dirichlet_alpha=[1, 1]))


def test_em_monotone_and_on_simplex():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m = int(rng.choice([2, 4, 6]))
        n = int(rng.integers(8, 257))
        post = random_posteriors(rng, n, m, concentration=0.5)
        source = random_prior(rng, m)
        alpha = 1 + rng.random(m) * rng.choice([0, 3])
        result = em_estimate_prior(post, source, EmConfig(alpha))
        assert np.all(np.diff(result.log_likelihood_trace) >= -1e-9)
        for pi in result.prior_path:
            assert np.all(pi >= 0)
            assert abs(pi.sum() - 1) < 1e-12


def test_em_trace_matches_independent_objective():
    rng = np.random.default_rng(8)
    post = random_posteriors(rng, 40, 3)
    source = random_prior(rng, 3)
    alpha = np.array([1.0, 2.0, 3.5])
    result = em_estimate_prior(post, source, EmConfig(alpha))
    ratios = post / source.probs
    expected = em_objective(np.array(result.prior_path).T, ratios, alpha)
    np.testing.assert_allclose(result.log_likelihood_trace, expected, rtol=1e-12)
    # expected counts at convergence sum to N
    assert result.expected_counts.sum() == pytest.approx(40, rel=1e-12)


@pytest.mark.parametrize("m", [2, 3])
def test_em_matches_grid_search_optimum(m):
    rng = np.random.default_rng(100 + m)
    for _ in range(10):
        post = random_posteriors(rng, int(rng.integers(5, 30)), m)
        source = random_prior(rng, m)
        result = em_estimate_prior(post, source)
        oracle = grid_search_prior(post / source.probs)
        assert np.abs(result.target_prior.probs - oracle).sum() < 1e-3


def test_map_estimate_matches_grid_search_with_pseudo_counts():
    rng = np.random.default_rng(9)
    post = random_posteriors(rng, 12, 3)
    source = random_prior(rng, 3)
    alpha = np.array([3.0, 1.0, 2.0])
    result = em_estimate_prior(post, source, EmConfig(alpha))
    oracle = grid_search_prior(post / source.probs, alpha)
    assert np.abs(result.target_prior.probs - oracle).sum() < 1e-3


def test_map_pseudo_counts_pull_towards_uniform():
    rng = np.random.default_rng(10)
    for _ in range(50):
        m = int(rng.choice([2, 3, 4]))
        post = random_posteriors(rng, int(rng.integers(5, 60)), m, concentration=0.5)
        source = random_prior(rng, m)
        uniform = np.full(m, 1 / m)
        mle = em_estimate_prior(post, source).target_prior.probs
        kappa = float(rng.uniform(0.5, 20))
        mapped = em_estimate_prior(post, source, EmConfig(1 + kappa * uniform)).target_prior.probs
        assert np.abs(mapped - uniform).sum() <= np.abs(mle - uniform).sum() + 1e-9


# fixed class marginal ---------------------------------------------------------

def test_fix_marginal_identity():
    prior = JointPrior(SPACE, [0.1, 0.2, 0.3, 0.4])
    out = fix_class_marginal(prior, prior.class_marginal())
    np.testing.assert_allclose(out.probs, prior.probs, atol=1e-15)


def test_fix_marginal_hand_example():
    # p(z|y) = [0.8, 0.2] for both classes; rescale by [0.6, 0.4]
    out = fix_class_marginal(JointPrior(SPACE, [0.4, 0.1, 0.4, 0.1]), [0.6, 0.4])
    np.testing.assert_allclose(out.probs, [0.48, 0.12, 0.32, 0.08], atol=1e-15)
    np.testing.assert_allclose(out.class_marginal(), [0.6, 0.4], atol=1e-12)


def test_fix_marginal_errors():
    with pytest.raises(InvalidInputError):
        fix_class_marginal(UNIFORM, [0.6, 0.6])
    with pytest.raises(DegenerateError):
        fix_class_marginal(JointPrior(SPACE, [0.5, 0.5, 0, 0]), [0.5, 0.5])


# estimator --------------------------------------------------------------------

def test_adapter_estimator_round_trip():
    spec = gauss_cmnist_spec()
    truth = JointPrior(SPACE, [0.45, 0.05, 0.05, 0.45])
    data = sample_dataset(truth, spec, 2000, seed=1)
    post = oracle_posterior(data.features, spec, UNIFORM)
    adapter = TestTimeAdapter(source_prior=UNIFORM).fit(post)
    assert clone(adapter).get_params()["source_prior"] == UNIFORM
    assert np.abs(adapter.target_prior_.probs - truth.probs).sum() < 0.06
    np.testing.assert_allclose(adapter.transform(post).sum(axis=1), 1.0)
    np.testing.assert_allclose(adapter.predict_proba(post).sum(axis=1), 1.0)
    assert (adapter.predict(post) == data.y).mean() > 0.9

    fixed = TestTimeAdapter(source_prior=UNIFORM, fixed_class_marginal=True).fit(post)
    np.testing.assert_allclose(fixed.target_prior_.class_marginal(), [0.5, 0.5], atol=1e-12)
