import numpy as np
import pytest
from mpmath import mp
from scipy.stats import multivariate_normal

from binloc.gllim import (FitConfig, GllimModel, MappingDirection, PriorMode, Responsibilities, TrainingSet,
                          count_parameters, e_step, fit, forward_predict, init_params, inverse_conditional,
                          inverse_density_params, inverse_predict, log_likelihood, m_step, variance_floors)


def _piecewise_linear(N=300, D=5, seed=0, noise=0.05):
    """Two affine regimes split at azimuth 0"""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-10.0, 10.0, size=(N, 2))
    A = rng.normal(size=(2, D, 2))
    b = rng.normal(size=(2, D))
    regime = (X[:, 0] > 0).astype(int)
    Y = np.einsum('ndl,nl->nd', A[regime], X) + b[regime] + noise * rng.normal(size=(N, D))
    return TrainingSet(X, Y, {'kind': 'synthetic'})


def _linear(N=200, D=4, seed=1, noise=0.01):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-5.0, 5.0, size=(N, 2))
    A = rng.normal(size=(D, 2))
    b = rng.normal(size=D)
    Y = X @ A.T + b + noise * rng.normal(size=(N, D))
    return TrainingSet(X, Y), A, b


def _single_component(D=3, seed=2):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    Gamma = (q * np.array([4.0, 1.5])) @ q.T
    return GllimModel(
        pi=np.array([1.0]),
        c=np.array([[1.0, -2.0]]),
        Gamma=Gamma[None],
        A=rng.normal(size=(1, D, 2)),
        b=rng.normal(size=(1, D)),
        sigma2=rng.uniform(0.5, 1.5, size=D),
    )


@pytest.fixture
def piecewise():
    return _piecewise_linear()


def test_parameter_counts():
    """Test parameter counts in both mapping directions"""
    assert count_parameters(1000, 2, 10) == 30060
    assert count_parameters(1536, 2, 10, include_noise=True) == 47676
    assert count_parameters(1, 1, 1, include_noise=True) == 6
    assert count_parameters(1000, 2, 10, MappingDirection.HIGH_TO_LOW) == 5035030


def test_parameter_count_rejects_nonpositive():
    """Test parameter count validation"""
    with pytest.raises(ValueError):
        count_parameters(0, 2, 10)


def test_init_is_deterministic(piecewise):
    """Test that initialisation is reproducible from its seed"""
    first = init_params(piecewise, 4, seed=3)
    second = init_params(piecewise, 4, seed=3)
    np.testing.assert_array_equal(first.c, second.c)
    np.testing.assert_array_equal(first.A, second.A)
    np.testing.assert_array_equal(first.sigma2, second.sigma2)


def test_init_rejects_too_few_points(piecewise):
    """Test initialisation with fewer than K(L + 1) points"""
    with pytest.raises(ValueError, match="too small"):
        init_params(piecewise.subset(np.arange(5)), 4)


def test_single_component_is_least_squares():
    """Test that one component reduces to ordinary least squares"""
    train, _, _ = _linear()
    model = init_params(train, 1)
    design = np.hstack([train.X, np.ones((train.N, 1))])
    coef = np.linalg.lstsq(design, train.Y, rcond=None)[0]
    np.testing.assert_allclose(model.A[0], coef[:2].T, atol=1e-8)
    np.testing.assert_allclose(model.b[0], coef[2], atol=1e-8)
    np.testing.assert_allclose(model.c[0], train.X.mean(axis=0), atol=1e-12)


def test_m_step_recovers_linear_map():
    """Test recovery of an affine map from nearly noiseless data"""
    train, A, b = _linear(noise=1e-3)
    R = np.ones((train.N, 1))
    model = m_step(Responsibilities(R, 0.0), train)
    np.testing.assert_allclose(model.A[0], A, atol=1e-3)
    np.testing.assert_allclose(model.b[0], b, atol=1e-3)
    assert model.pi[0] == pytest.approx(1.0)


def test_e_step_rows_sum_to_one(piecewise):
    """Test responsibilities are normalised per point"""
    model = init_params(piecewise, 3)
    resp = e_step(model, piecewise)
    assert resp.R.shape == (piecewise.N, model.K)
    np.testing.assert_allclose(resp.R.sum(axis=1), 1.0, atol=1e-12)
    assert resp.log_likelihood == pytest.approx(log_likelihood(model, piecewise))


def test_m_step_collapse():
    """Test the error once every component is pruned"""
    train = TrainingSet(np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[1.0], [2.0]]))
    with pytest.raises(RuntimeError, match="training collapsed"):
        m_step(Responsibilities(np.ones((2, 1)), 0.0), train)


@pytest.mark.parametrize("seed", range(10))
def test_fit_log_likelihood_is_monotone(seed):
    """Test that EM never lowers the training log-likelihood"""
    train = _piecewise_linear(seed=seed)
    model = fit(train, 4, FitConfig(max_iter=30, seed=seed))
    history = np.array(model.history)
    assert len(history) >= 2
    assert np.all(np.diff(history) >= -1e-9 * np.abs(history[:-1]))
    assert history[-1] == pytest.approx(log_likelihood(model, train), rel=1e-9)


def test_fit_is_reproducible(piecewise):
    """Test that fitting twice gives identical models"""
    config = FitConfig(max_iter=10, seed=5)
    first = fit(piecewise, 3, config)
    second = fit(piecewise, 3, config)
    np.testing.assert_array_equal(first.A, second.A)
    assert first.history == second.history


def test_fit_threads_do_not_change_the_result(piecewise):
    """Test that thread count does not change the fit"""
    serial = fit(piecewise, 3, FitConfig(max_iter=5, seed=1, threads=1))
    parallel = fit(piecewise, 3, FitConfig(max_iter=5, seed=1, threads=4))
    np.testing.assert_array_equal(serial.Gamma, parallel.Gamma)
    assert serial.history == parallel.history


def test_fixed_prior(piecewise):
    """Test fitting with fixed uniform priors"""
    model = fit(piecewise, 3, FitConfig(max_iter=5, prior_mode=PriorMode.FIXED))
    np.testing.assert_allclose(model.pi, 1.0 / model.K)
    assert model.prior_mode is PriorMode.FIXED


def test_fit_records_bounds(piecewise):
    """Test that the fit records the training direction bounds"""
    model = fit(piecewise, 2, FitConfig(max_iter=3))
    np.testing.assert_array_equal(model.bounds[0], piecewise.X.min(axis=0))
    np.testing.assert_array_equal(model.bounds[1], piecewise.X.max(axis=0))


def test_model_json_round_trip(tmp_path, piecewise):
    """Test saving and loading a model"""
    model = fit(piecewise, 2, FitConfig(max_iter=3))
    path = tmp_path / 'model.json'
    model.save(path)
    loaded = GllimModel.load(path)
    for name in ('pi', 'c', 'Gamma', 'A', 'b', 'sigma2', 'bounds'):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))
    assert loaded.prior_mode is model.prior_mode


def test_model_load_rejects_other_versions(tmp_path, piecewise):
    """Test rejection of an unknown model version"""
    model = fit(piecewise, 2, FitConfig(max_iter=2))
    data = model.to_dict()
    data['version'] = 99
    with pytest.raises(ValueError, match="version"):
        GllimModel.from_dict(data)


def test_training_set_round_trip(tmp_path, piecewise):
    """Test saving and loading a training set"""
    path = tmp_path / 'train.npz'
    piecewise.save(path)
    loaded = TrainingSet.load(path)
    np.testing.assert_array_equal(loaded.X, piecewise.X)
    np.testing.assert_array_equal(loaded.Y, piecewise.Y)
    assert loaded.metadata == piecewise.metadata


def test_training_set_rejects_non_finite():
    """Test rejection of non-finite training values"""
    with pytest.raises(ValueError, match="non-finite"):
        TrainingSet(np.array([[0.0, np.nan]]), np.array([[1.0]]))


def test_inverse_density_matches_dense_gaussian():
    """Test the Woodbury density against a dense Gaussian"""
    model = _single_component()
    params = inverse_density_params(model)
    y = np.array([0.3, -1.2, 2.0])
    dense = multivariate_normal(params.c_star[0], params.gamma_star(0)).logpdf(y)
    assert params.log_density(y)[0] == pytest.approx(dense, rel=1e-10)


def test_inverse_conditional_matches_joint_gaussian():
    """Test the inverse conditional against Gaussian conditioning"""
    model = _single_component()
    y = np.array([0.5, 0.1, -0.7])
    log_w, means, covs = inverse_conditional(model, y)
    A, c, Gamma = model.A[0], model.c[0], model.Gamma[0]
    gamma_star = np.diag(model.sigma2) + A @ Gamma @ A.T
    gain = Gamma @ A.T @ np.linalg.inv(gamma_star)
    np.testing.assert_allclose(means[0], c + gain @ (y - A @ c - model.b[0]), atol=1e-10)
    np.testing.assert_allclose(covs[0], Gamma - gain @ A @ Gamma, atol=1e-10)
    assert log_w[0] == pytest.approx(0.0)
    np.testing.assert_allclose(inverse_predict(model, y), means[0])


def test_forward_predict_single_component():
    """Test forward prediction with one component"""
    model = _single_component()
    x = np.array([2.0, 3.0])
    np.testing.assert_allclose(forward_predict(model, x), model.A[0] @ x + model.b[0])


def test_inverse_predict_recovers_directions(piecewise):
    """Test that inverse prediction recovers training directions"""
    model = fit(piecewise, 4, FitConfig(max_iter=50))
    estimates = np.array([inverse_predict(model, y) for y in piecewise.Y[:20]])
    assert np.median(np.linalg.norm(estimates - piecewise.X[:20], axis=1)) < 1.0


def test_singular_region_covariance():
    """Test inversion with a singular region covariance"""
    model = _single_component()
    model.Gamma = np.zeros((1, 2, 2))
    with pytest.raises(ValueError, match="singular"):
        inverse_density_params(model)


def _random_model(rng, K, D, L=2):
    Gamma = np.empty((K, L, L))
    for k in range(K):
        q, _ = np.linalg.qr(rng.normal(size=(L, L)))
        Gamma[k] = (q * rng.uniform(1.0, 3.0, size=L)) @ q.T
        Gamma[k] = 0.5 * (Gamma[k] + Gamma[k].T)
    return GllimModel(
        pi=rng.dirichlet(np.full(K, 2.0)),
        c=rng.uniform(-3.0, 3.0, size=(K, L)),
        Gamma=Gamma,
        A=rng.normal(0.0, 0.5, size=(K, D, L)),
        b=rng.normal(size=(K, D)),
        sigma2=rng.uniform(0.5, 1.5, size=D),
    )


def _mp_log_joint(model, x, y):
    """log pi_k + log N(x; c_k, Gamma_k) + log N(y; A_k x + b_k, Sigma) at 40 digits"""
    out = []
    for k in range(model.K):
        g = [[mp.mpf(v) for v in row] for row in model.Gamma[k]]
        det = g[0][0] * g[1][1] - g[0][1] * g[1][0]
        dx = [mp.mpf(x[i]) - mp.mpf(model.c[k][i]) for i in range(2)]
        quad_x = (g[1][1] * dx[0] ** 2 - (g[0][1] + g[1][0]) * dx[0] * dx[1] + g[0][0] * dx[1] ** 2) / det
        total = mp.log(mp.mpf(model.pi[k])) - mp.log(2 * mp.pi) - mp.log(det) / 2 - quad_x / 2
        for d in range(model.D):
            mean = mp.mpf(model.b[k][d]) + sum(mp.mpf(model.A[k][d][i]) * mp.mpf(x[i]) for i in range(2))
            var = mp.mpf(model.sigma2[d])
            total -= (mp.log(2 * mp.pi * var) + (mp.mpf(y[d]) - mean) ** 2 / var) / 2
        out.append(total)
    return out


def test_e_step_matches_extended_precision():
    """Test responsibilities and log-likelihood against a 40-digit evaluation"""
    rng = np.random.default_rng(21)
    model = _random_model(rng, K=3, D=4)
    train = TrainingSet(rng.uniform(-3.0, 3.0, size=(5, 2)), rng.normal(size=(5, 4)))
    resp = e_step(model, train)
    mp.dps = 40
    expected_ll = mp.mpf(0)
    for n in range(train.N):
        joint = _mp_log_joint(model, train.X[n], train.Y[n])
        norm = mp.log(mp.fsum(mp.exp(v) for v in joint))
        expected_ll += norm
        for k in range(model.K):
            assert resp.R[n, k] == pytest.approx(float(mp.exp(joint[k] - norm)), abs=1e-12)
    assert resp.log_likelihood == pytest.approx(float(expected_ll), rel=1e-12)
    assert log_likelihood(model, train) == pytest.approx(float(expected_ll), rel=1e-12)


def test_identical_components_share_responsibility():
    """Test that two identical components split every point evenly"""
    base = _single_component()
    twin = GllimModel(pi=np.array([0.5, 0.5]), c=np.repeat(base.c, 2, axis=0),
                      Gamma=np.repeat(base.Gamma, 2, axis=0), A=np.repeat(base.A, 2, axis=0),
                      b=np.repeat(base.b, 2, axis=0), sigma2=base.sigma2)
    train, _, _ = _linear(N=40, D=3)
    resp = e_step(twin, train)
    np.testing.assert_allclose(resp.R, 0.5, atol=1e-12)


def test_uniform_responsibilities_give_identical_components(piecewise):
    """Test that uniform responsibilities give identical local fits"""
    R = np.full((piecewise.N, 3), 1.0 / 3.0)
    model = m_step(Responsibilities(R, 0.0), piecewise)
    for k in (1, 2):
        np.testing.assert_allclose(model.A[k], model.A[0], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(model.b[k], model.b[0], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(model.c[k], model.c[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(model.pi, 1.0 / 3.0)


def test_duplicated_points_double_the_log_likelihood(piecewise):
    """Test that duplicating every point doubles the log-likelihood"""
    model = init_params(piecewise, 3)
    doubled = TrainingSet(np.vstack([piecewise.X, piecewise.X]), np.vstack([piecewise.Y, piecewise.Y]))
    assert log_likelihood(model, doubled) == pytest.approx(2.0 * log_likelihood(model, piecewise), rel=1e-12)


def test_m_step_prunes_light_components(piecewise):
    """Test pruning of components holding less than L + 1 mass"""
    R = np.zeros((piecewise.N, 3))
    R[:150, 0] = 1.0
    R[150:-2, 1] = 1.0
    R[-2:, 2] = 1.0
    floors = variance_floors(piecewise)
    model = m_step(Responsibilities(R, 0.0), piecewise, floors=floors)
    assert model.K == 2
    model.validate()
    for name in ('pi', 'c', 'Gamma', 'A', 'b', 'sigma2'):
        assert np.all(np.isfinite(getattr(model, name)))
    assert np.all(model.sigma2 >= floors.sigma2)
    assert np.linalg.eigvalsh(model.Gamma).min() >= floors.gamma * (1.0 - 1e-9)


def _blob_training_set():
    """57 scattered directions plus a tight far-away blob of 3"""
    rng = np.random.default_rng(11)
    X = np.vstack([rng.uniform(-10.0, 10.0, size=(57, 2)), [40.0, 40.0] + 0.1 * rng.normal(size=(3, 2))])
    W = rng.normal(size=(2, 4))
    Y = np.sin(X / 5.0) @ W + 0.05 * rng.normal(size=(60, 4))
    return TrainingSet(X, Y)


def test_init_merges_clusters_too_small_to_fit():
    """Test merging of k-means clusters with fewer than L + 1 points"""
    train = _blob_training_set()
    floors = variance_floors(train)
    model = init_params(train, 20, seed=0, floors=floors)
    assert model.K < 20
    assert np.linalg.eigvalsh(model.Gamma).min() > 100 * floors.gamma


@pytest.mark.parametrize("prior_mode", [PriorMode.FREE, PriorMode.FIXED])
def test_fit_does_not_drop_at_the_first_iteration(prior_mode):
    """Test that the first EM step cannot lower the recorded log-likelihood"""
    train = _blob_training_set()
    model = fit(train, 20, FitConfig(max_iter=1, prior_mode=prior_mode))
    history = model.history
    assert len(history) == 2
    assert history[1] >= history[0] - 1e-9 * abs(history[0])


def _three_regime_model():
    c = np.array([[-10.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    rng = np.random.default_rng(5)
    return GllimModel(pi=np.array([0.5, 0.3, 0.2]), c=c, Gamma=np.repeat(4.0 * np.eye(2)[None], 3, axis=0),
                      A=rng.normal(size=(3, 4, 2)), b=rng.normal(scale=3.0, size=(3, 4)),
                      sigma2=np.full(4, 0.25))


def _sample(model, N, seed):
    rng = np.random.default_rng(seed)
    k = rng.choice(model.K, size=N, p=model.pi)
    X = np.stack([rng.multivariate_normal(model.c[j], model.Gamma[j]) for j in k])
    Y = np.einsum('ndl,nl->nd', model.A[k], X) + model.b[k] + rng.normal(size=(N, model.D)) * np.sqrt(model.sigma2)
    return TrainingSet(X, Y)


def test_held_out_likelihood_approaches_the_generating_model():
    """Test held-out likelihood against the generating 3-component model"""
    truth = _three_regime_model()
    model = fit(_sample(truth, 3000, seed=1), 3, FitConfig(max_iter=100))
    held_out = _sample(truth, 1000, seed=2)
    reference = log_likelihood(truth, held_out)
    assert abs(log_likelihood(model, held_out) - reference) <= 0.02 * abs(reference)
