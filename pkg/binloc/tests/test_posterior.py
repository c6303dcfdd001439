import numpy as np
import pytest

from binloc.gllim import FitConfig, GllimModel, PriorMode, TrainingSet, fit, inverse_conditional
from binloc.posterior import (GridSpec, default_grid, grid_oracle_posterior, localize, oracle_check,
                              posterior_mean, random_instance, spectrogram_posterior)
from binloc.spectro import BinauralSpectrogram
from binloc.utils.cues import Cue


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _spec(features, activity=None):
    activity = np.ones(features.shape, dtype=bool) if activity is None else activity
    return BinauralSpectrogram(features, activity, features.shape[0], Cue.ILD)


def test_single_column_reduces_to_inverse_conditional(rng):
    """Test that one full frame gives the inverse conditional"""
    model, _ = random_instance(rng, D=6, T=1, K=3)
    y = rng.normal(size=6)
    gmm = spectrogram_posterior(model, _spec(y[:, None]))
    log_w, means, covs = inverse_conditional(model, y)
    np.testing.assert_allclose(gmm.weights, np.exp(log_w), atol=1e-10)
    np.testing.assert_allclose(gmm.means, means, atol=1e-9)
    np.testing.assert_allclose(gmm.covs, covs, atol=1e-9)


def test_masked_entries_do_not_matter(rng):
    """Test that masked values never change the posterior"""
    model, spec = random_instance(rng, D=5, T=4, K=2)
    base = spectrogram_posterior(model, spec)
    for _ in range(20):
        features = spec.features.copy()
        hidden = ~spec.activity
        features[hidden] = rng.normal(scale=1e6, size=int(hidden.sum()))
        perturbed = spectrogram_posterior(model, BinauralSpectrogram(features, spec.activity, spec.F, spec.cue))
        np.testing.assert_array_equal(perturbed.log_weights, base.log_weights)
        np.testing.assert_array_equal(perturbed.means, base.means)
        np.testing.assert_array_equal(perturbed.covs, base.covs)


def test_masked_nan_is_ignored(rng):
    """Test a NaN at a masked entry"""
    model, spec = random_instance(rng, D=4, T=3, K=2)
    activity = spec.activity.copy()
    activity[0, 0] = False
    features = spec.features.copy()
    features[0, 0] = np.nan
    gmm = spectrogram_posterior(model, BinauralSpectrogram(features, activity, spec.F, spec.cue))
    assert np.all(np.isfinite(gmm.means))


def test_weights_and_covariances_are_valid(rng):
    """Test posterior weights and covariances"""
    model, spec = random_instance(rng, D=6, T=5, K=3)
    gmm = spectrogram_posterior(model, spec)
    assert gmm.weights.sum() == pytest.approx(1.0)
    for k in range(gmm.K):
        np.testing.assert_allclose(gmm.covs[k], gmm.covs[k].T)
        assert np.all(np.linalg.eigvalsh(gmm.covs[k]) > 0)
        # observations shrink the region covariance
        assert np.all(np.linalg.eigvalsh(model.Gamma[k] - gmm.covs[k]) >= -1e-10)


def test_duplicated_frames_shrink_every_component(rng):
    """Test that duplicated frames shrink every posterior covariance"""
    model, _ = random_instance(rng, D=4, T=1, K=3)
    features = rng.normal(size=(4, 5))
    once = spectrogram_posterior(model, _spec(features))
    twice = spectrogram_posterior(model, _spec(np.hstack([features, features])))
    for k in range(model.K):
        gap = np.linalg.eigvalsh(once.covs[k] - twice.covs[k])
        assert gap.min() >= -1e-12
        assert gap.max() > 0


def test_agrees_with_grid_oracle(rng):
    """Test the closed form against the grid oracle"""
    for _ in range(5):
        model, spec = random_instance(rng, D=int(rng.integers(1, 7)), T=int(rng.integers(1, 5)),
                                      K=int(rng.integers(1, 4)))
        gmm = spectrogram_posterior(model, spec)
        oracle = grid_oracle_posterior(model, spec, default_grid(model, nodes=151))
        assert np.linalg.norm(posterior_mean(gmm) - oracle.mean) < 2 * oracle.spacing.max()
        np.testing.assert_allclose(gmm.weights, oracle.component_weights, atol=1e-3)


def test_zero_slope_returns_the_prior(rng):
    """Test that a flat mapping leaves the prior unchanged"""
    model, spec = random_instance(rng, D=3, T=2, K=2)
    model.A = np.zeros_like(model.A)
    model.b = np.repeat(model.b[:1], model.K, axis=0)
    gmm = spectrogram_posterior(model, spec)
    np.testing.assert_allclose(gmm.weights, model.pi, atol=1e-10)
    np.testing.assert_allclose(gmm.means, model.c, atol=1e-10)
    np.testing.assert_allclose(gmm.covs, model.Gamma, atol=1e-10)
    oracle = grid_oracle_posterior(model, spec, default_grid(model, nodes=121))
    np.testing.assert_allclose(oracle.mean, model.pi @ model.c, atol=0.1)


def test_posterior_mean_is_weighted_average(rng):
    """Test the posterior mean"""
    model, spec = random_instance(rng, D=3, T=2, K=3)
    gmm = spectrogram_posterior(model, spec)
    np.testing.assert_allclose(posterior_mean(gmm), gmm.weights @ gmm.means)


def test_empty_spectrogram(rng):
    """Test a spectrogram with no active entry"""
    model, spec = random_instance(rng, D=3, T=2, K=2)
    empty = BinauralSpectrogram(spec.features, np.zeros(spec.features.shape, dtype=bool), spec.F, spec.cue)
    with pytest.raises(ValueError, match="empty spectrogram"):
        spectrogram_posterior(model, empty)
    # the full-spectrogram ablation ignores the mask
    assert spectrogram_posterior(model, empty, use_activity=False).K == model.K


def test_dimension_mismatch(rng):
    """Test a spectrogram of the wrong dimension"""
    model, _ = random_instance(rng, D=3, T=2, K=2)
    with pytest.raises(ValueError, match="D="):
        spectrogram_posterior(model, _spec(np.zeros((4, 2))))


def test_localize_report(rng):
    """Test the localization report"""
    model, spec = random_instance(rng, D=4, T=3, K=2)
    report = localize(model, spec)
    assert report.num_sources == 1
    assert report.estimate.shape == (2,)
    content = report.to_dict(include_timing=False)
    assert 'elapsed_ms' not in content
    assert content['version'] == 1
    assert len(content['gmm']) == model.K
    assert report.to_dict()['elapsed_ms'] >= 0


def test_grid_oracle_rejects_high_dimensions(rng):
    """Test the grid oracle beyond two dimensions"""
    model, spec = random_instance(rng, D=3, T=2, K=1, L=3)
    with pytest.raises(ValueError, match="L <= 2"):
        grid_oracle_posterior(model, spec)


def test_grid_spec_validation():
    """Test grid specification checks"""
    with pytest.raises(ValueError):
        GridSpec((0.0,), (0.0,), (10,))
    grid = GridSpec((0.0, -1.0), (2.0, 1.0), (3, 5))
    assert grid.points().shape == (15, 2)
    np.testing.assert_allclose(grid.spacing, [1.0, 0.5])


def test_oracle_check_passes():
    """Test the oracle check on a few instances"""
    result = oracle_check(trials=4, seed=11, nodes=101)
    assert result.trials == 4
    assert result.passed
    assert result.max_weight_error < 1e-3


def test_prior_mode_survives_random_instance(rng):
    """Test random instances use free priors"""
    model, _ = random_instance(rng, D=2, T=1, K=2)
    assert isinstance(model, GllimModel)
    assert model.prior_mode is PriorMode.FREE


def test_mirrored_model_centres_the_azimuth(rng):
    """Test a model symmetric in azimuth gives a zero mean azimuth"""
    flip = np.diag([-1.0, 1.0])
    Gamma = np.array([[2.0, 0.6], [0.6, 1.5]])
    A = rng.normal(0.0, 0.5, size=(5, 2))
    b = rng.normal(size=5)
    model = GllimModel(pi=np.array([0.5, 0.5]), c=np.array([[3.0, 1.0], [-3.0, 1.0]]),
                       Gamma=np.stack([Gamma, flip @ Gamma @ flip]), A=np.stack([A, A @ flip]),
                       b=np.stack([b, b]), sigma2=np.full(5, 0.8),
                       bounds=np.array([[-11.0, -11.0], [11.0, 11.0]]))
    spec = _spec(rng.normal(size=(5, 3)))
    assert posterior_mean(spectrogram_posterior(model, spec))[0] == pytest.approx(0.0, abs=1e-9)
    oracle = grid_oracle_posterior(model, spec, default_grid(model, nodes=101))
    assert abs(oracle.mean[0]) < oracle.spacing[0]


def _two_source_training(columns):
    rng = np.random.default_rng(3)
    X = rng.uniform(-10.0, 10.0, size=(240, 4))
    W = rng.normal(size=(4, 6))
    Y = np.tanh(X / 8.0) @ W + 0.05 * rng.normal(size=(240, 6))
    return TrainingSet(X[:, columns], Y)


def test_swapping_source_blocks_swaps_the_estimate(rng):
    """Test that swapping the source blocks in training swaps the estimate"""
    config = FitConfig(max_iter=5, rel_tol=1e-15, seed=2)
    straight = fit(_two_source_training([0, 1, 2, 3]), 3, config)
    swapped = fit(_two_source_training([2, 3, 0, 1]), 3, config)
    spec = _spec(rng.normal(size=(6, 4)))
    estimate = posterior_mean(spectrogram_posterior(straight, spec))
    estimate_swapped = posterior_mean(spectrogram_posterior(swapped, spec))
    np.testing.assert_allclose(estimate_swapped, estimate[[2, 3, 0, 1]], atol=1e-6)
