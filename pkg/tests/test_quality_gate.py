import math

import numpy as np
import pytest
import torch

from benchmark_data import BLUR_LEVELS, IdentitySpec, NOISE_LEVELS, DegradationSpec, degrade
from errors import ConfigurationError, GatingError, InputError
from quality_gate import (CallableEstimator, GateCalibration, GradientEnergyEstimator, QualityGate,
                          SharpnessEstimator, alpha_from_quality, builtin_sharpness_estimator, calibrate_gate,
                          get_estimator, read_calibration, write_calibration)


def _constant_estimator():
    return CallableEstimator('mean-level', lambda image: float(np.asarray(image).mean()))


def _constant_images(values):
    return [np.full((8, 8), v, dtype=np.float64) for v in values]


def _face(index=0):
    return IdentitySpec(identity_id=3, seed=0).render('probe', index, image_size=64)


def test_calibration_on_exhaustive_set_matches_closed_form():
    calib = calibrate_gate(_constant_estimator(), _constant_images([0.4, 0.5, 0.6]), l=3, seed=0)
    sigma = math.sqrt(0.02 / 3)
    assert abs(calib.mu - 0.5) < 1e-12
    assert abs(calib.sigma - sigma) < 1e-12
    assert abs(calib.threshold - 0.5816496580927726) < 1e-12
    assert calib.sample_count == 3


def test_calibration_is_seeded(tmp_path):
    images = _constant_images(np.linspace(0.1, 0.9, 20))
    first = write_calibration(tmp_path / 'a.txt', calibrate_gate(_constant_estimator(), images, l=7, seed=5))
    second = write_calibration(tmp_path / 'b.txt', calibrate_gate(_constant_estimator(), images, l=7, seed=5))
    assert first.read_bytes() == second.read_bytes()
    assert read_calibration(first) == calibrate_gate(_constant_estimator(), images, l=7, seed=5)


def test_calibration_samples_with_replacement_when_l_exceeds_dataset():
    calib = calibrate_gate(_constant_estimator(), _constant_images([0.2, 0.8]), l=5, seed=0)
    assert calib.sample_count == 5
    assert 0.2 <= calib.mu <= 0.8


def test_calibration_errors():
    with pytest.raises(InputError):
        calibrate_gate(_constant_estimator(), [], l=3, seed=0)
    with pytest.raises(ConfigurationError):
        calibrate_gate(_constant_estimator(), _constant_images([0.5]), l=0, seed=0)


def test_calibration_record_validation():
    with pytest.raises(ConfigurationError):
        GateCalibration(mu=0.5, sigma=-0.1, threshold=0.4, sample_count=3, estimator_name='x', seed=0)
    with pytest.raises(ConfigurationError):
        GateCalibration(mu=0.5, sigma=0.1, threshold=0.7, sample_count=3, estimator_name='x', seed=0)
    with pytest.raises(InputError):
        GateCalibration.from_text("mu=0.5\nsigma=0.1\n")


def test_alpha_is_one_half_at_threshold():
    calib = GateCalibration.from_stats(0.37, 0.11, 10, 'x', 0)
    assert alpha_from_quality([calib.threshold], calib)[0] == 0.5


def test_alpha_matches_piecewise_definition(rng):
    q = rng.random(100_000)
    t = rng.random(100_000)
    for q_i, t_i in zip(q[:2000], t[:2000]):
        calib = GateCalibration.from_stats(t_i, 0.0, 1, 'x', 0)
        if q_i > t_i:
            expected = 0.5 + (q_i - t_i)
        elif q_i < t_i:
            expected = 0.5 - (t_i - q_i)
        else:
            expected = 0.5
        assert alpha_from_quality([q_i], calib, clamp=False)[0] == expected
    # vectorized form over the full sample against the collapsed expression
    calib = GateCalibration.from_stats(0.5, 0.1, 1, 'x', 0)
    assert np.array_equal(alpha_from_quality(q, calib, clamp=False), 0.5 + (q - calib.threshold))


def test_alpha_is_clamped_and_monotone(rng):
    calib = GateCalibration.from_stats(0.4, 0.2, 5, 'x', 0)
    q = np.sort(rng.uniform(-1.0, 2.0, size=500))
    alpha = alpha_from_quality(q, calib)
    assert alpha.min() >= 0.0 and alpha.max() <= 1.0
    assert np.all(np.diff(alpha) >= 0)


def test_alpha_rejects_non_finite_scores():
    calib = GateCalibration.from_stats(0.4, 0.2, 5, 'x', 0)
    with pytest.raises(GatingError):
        alpha_from_quality([0.3, float('inf')], calib)


def test_sharpness_constant_image_scores_zero():
    assert builtin_sharpness_estimator().score(np.full((32, 32), 0.4)) == 0.0


def test_sharpness_decreases_with_blur():
    estimator = builtin_sharpness_estimator()
    image = _face()
    scores = [estimator.score(degrade(image, DegradationSpec(blur_sigma=s))) for s in BLUR_LEVELS]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_sharpness_decreases_with_noise():
    estimator = builtin_sharpness_estimator()
    image = _face()
    scores = [estimator.score(degrade(image, DegradationSpec(noise_sigma=s), rng_noise=np.random.default_rng(1)))
              for s in NOISE_LEVELS]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_estimators_accept_tensors_and_channels():
    estimator = SharpnessEstimator()
    image = _face()
    chw = torch.from_numpy(np.repeat(image[None], 3, axis=0))
    assert abs(estimator.score(chw) - estimator.score(image)) < 1e-6
    assert 0.0 <= GradientEnergyEstimator().score(image) <= 1.0


def test_estimator_input_errors():
    with pytest.raises(InputError):
        SharpnessEstimator().score(np.zeros((0, 0)))
    with pytest.raises(InputError):
        SharpnessEstimator().score(np.zeros((2, 40)))
    with pytest.raises(GatingError):
        CallableEstimator('broken', lambda image: float('nan')).score(np.ones((4, 4)))


def test_callable_estimator_rescales_nominal_range():
    estimator = CallableEstimator('percent', lambda image: 150.0, nominal_range=(0.0, 100.0))
    assert estimator.score(np.ones((4, 4))) == 1.0
    estimator = CallableEstimator('percent', lambda image: 25.0, nominal_range=(0.0, 100.0))
    assert estimator.score(np.ones((4, 4))) == 0.25


def test_estimator_registry():
    assert get_estimator('laplacian-sharpness').name == 'laplacian-sharpness'
    assert get_estimator('gradient-energy').name == 'gradient-energy'
    with pytest.raises(ConfigurationError):
        get_estimator('brisque')


def test_gate_alpha_for_batch():
    estimator = _constant_estimator()
    calib = calibrate_gate(estimator, _constant_images([0.4, 0.5, 0.6]), l=3, seed=0)
    gate = QualityGate(estimator, calib)
    images = torch.stack([torch.full((1, 8, 8), v, dtype=torch.float64) for v in (0.2, calib.threshold, 0.9)])
    alpha = gate.alpha_for_images(images)
    assert alpha.dtype == torch.float64
    assert alpha[1].item() == pytest.approx(0.5, abs=1e-12)
    assert alpha[0] < alpha[1] < alpha[2]


def test_uncalibrated_gate_refuses_alpha():
    with pytest.raises(GatingError):
        QualityGate(SharpnessEstimator()).alpha_for_images(torch.rand(2, 1, 8, 8))


def test_gate_rejects_foreign_calibration():
    calib = GateCalibration.from_stats(0.5, 0.1, 3, 'gradient-energy', 0)
    with pytest.raises(ConfigurationError):
        QualityGate(SharpnessEstimator(), calib)


def test_identical_scores_give_zero_spread():
    calib = calibrate_gate(_constant_estimator(), _constant_images([0.3] * 4), l=6, seed=1)
    assert calib.sigma == 0.0
    assert calib.mu == pytest.approx(0.3, abs=1e-12)
    assert calib.threshold == calib.mu
