import math

import numpy as np
import pytest
from sklearn.base import clone

from metashift.calibrate import (
    BCTSCalibrator,
    CalibrationParams,
    apply_bcts,
    bcts_nll_and_grad,
    fit_bcts,
    negative_log_likelihood,
)
from metashift.core import softmax_rows
from metashift.exceptions import InsufficientDataError, InvalidInputError, InvalidParameterError

from oracles import central_difference, relative_error


def sample_labels(rng, logits):
    probs = softmax_rows(logits)
    return (probs.cumsum(axis=1) > rng.random((len(probs), 1))).argmax(axis=1)


def test_identity_params_equal_softmax():
    logits = np.random.default_rng(0).normal(size=(30, 4)) * 5
    out = apply_bcts(logits, CalibrationParams.identity(4))
    np.testing.assert_allclose(out, softmax_rows(logits), atol=1e-15, rtol=0)


def test_infinite_temperature_limit_is_uniform():
    out = apply_bcts([[5.0, -5.0]], CalibrationParams(1e9, np.zeros(2)))
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-8)


def test_temperature_and_bias_example():
    out = apply_bcts([[0.0, 0.0]], CalibrationParams(2.0, [math.log(2), 0.0]))
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=1e-15)


@pytest.mark.parametrize("temperature", [0.0, -1.0, np.nan])
def test_nonpositive_temperature_rejected(temperature):
    with pytest.raises(InvalidParameterError):
        CalibrationParams(temperature, np.zeros(2))


def test_output_invariant_to_common_bias_offset():
    logits = np.random.default_rng(1).normal(size=(10, 3))
    bias = np.array([0.3, -0.2, 0.5])
    a = apply_bcts(logits, CalibrationParams(1.7, bias))
    b = apply_bcts(logits, CalibrationParams(1.7, bias + 4.2))
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_nll_examples():
    assert negative_log_likelihood(np.eye(3), [0, 1, 2]) == 0.0
    assert negative_log_likelihood(np.full((5, 4), 0.25), [0, 1, 2, 3, 0]) == pytest.approx(math.log(4), abs=1e-15)
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert expected == pytest.approx(0.164252033486018, abs=1e-14)
    assert negative_log_likelihood([[0.9, 0.1], [0.2, 0.8]], [0, 1]) == pytest.approx(expected, abs=1e-15)


def test_nll_length_mismatch():
    with pytest.raises(InvalidInputError):
        negative_log_likelihood([[0.5, 0.5]], [0, 1])


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(50, 4)) * 2
    labels = rng.integers(0, 4, size=50)
    theta = np.concatenate([[rng.normal(scale=0.5)], rng.normal(size=4)])

    def nll(t):
        return negative_log_likelihood(apply_bcts(logits, CalibrationParams(math.exp(t[0]), t[1:])), labels)

    _, g_u, g_b = bcts_nll_and_grad(logits, labels, theta[0], theta[1:])
    numeric = central_difference(nll, theta, step=1e-5)
    assert relative_error(np.concatenate([[g_u], g_b]), numeric) < 1e-4


def test_fit_on_calibrated_logits_stays_near_identity():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(5000, 4)) * 2
    labels = sample_labels(rng, logits)
    params = fit_bcts(logits, labels)
    assert 0.9 <= params.temperature <= 1.1
    assert np.max(np.abs(params.bias)) <= 0.1
    assert abs(params.bias.sum()) < 1e-12
    fitted = negative_log_likelihood(apply_bcts(logits, params), labels)
    assert fitted <= negative_log_likelihood(softmax_rows(logits), labels) + 1e-9


def test_fit_recovers_temperature_of_scaled_logits():
    rng = np.random.default_rng(12)
    true = rng.normal(size=(5000, 4)) * 2
    labels = sample_labels(rng, true)
    params = fit_bcts(3 * true, labels)
    assert 2.5 <= params.temperature <= 3.5
    # independent 1-D grid search over T with zero bias
    grid = np.linspace(1.0, 5.0, 4001)
    nlls = [negative_log_likelihood(softmax_rows(3 * true / t), labels) for t in grid]
    assert abs(params.temperature - grid[int(np.argmin(nlls))]) < 0.2


def test_fit_never_worse_than_identity_on_adversarial_data():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(40, 4))
    labels = rng.integers(0, 4, size=40)
    params = fit_bcts(logits, labels)
    identity = negative_log_likelihood(softmax_rows(logits), labels)
    assert negative_log_likelihood(apply_bcts(logits, params), labels) <= identity + 1e-9


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit_bcts(np.zeros((0, 4)), [])
    with pytest.raises(InsufficientDataError):
        fit_bcts(np.zeros((3, 4)), [0, 1, 2])
    with pytest.raises(InvalidInputError):
        fit_bcts(np.zeros((5, 2)), [0, 1, 2, 0, 1])


def test_estimator_interface():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(500, 3)) * 2
    labels = sample_labels(rng, logits / 2)
    cal = BCTSCalibrator(max_epochs=200)
    assert clone(cal).get_params()["max_epochs"] == 200
    out = cal.fit(logits, labels).transform(logits)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert 1.5 < cal.temperature_ < 2.6
