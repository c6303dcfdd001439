"""
Closed-form direction posterior of a sparse binaural spectrogram.

Given a trained low-to-high model and S = {Y', chi}, p(x | S) is a K-component
Gaussian mixture whose parameters only involve the active entries of S.  A
brute-force grid evaluation of the same posterior is provided as an
independent check.
"""

import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .gllim import GllimModel, PriorMode
from .spectro import BinauralSpectrogram
from .utils.cues import Cue
from .utils.logger import log_progress, setup_logger
from .utils.numerics import CompensatedSum, LOG_2PI, log_gauss_full, normalize_log_weights, symmetrize

logger = setup_logger(__name__)

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PosteriorGmm:
    """Mixture sum_k nu_k N(x; mu_k, V_k) over direction space (degrees)"""
    log_weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def L(self) -> int:
        return self.means.shape[1]

    def to_list(self) -> List[Dict[str, Any]]:
        return [
            {'nu': float(nu), 'mu': mu.tolist(), 'V': V.tolist()}
            for nu, mu, V in zip(self.weights, self.means, self.covs)
        ]


def _active(model: GllimModel, spec: BinauralSpectrogram, use_activity: bool) -> np.ndarray:
    if spec.D != model.D:
        raise ValueError(f"spectrogram has D={spec.D} but model expects D={model.D}")
    chi = spec.activity if use_activity else np.ones(spec.features.shape, dtype=bool)
    if not np.any(chi):
        raise ValueError("empty spectrogram")
    if not np.all(np.isfinite(spec.features[chi])):
        raise ValueError("non-finite feature at an active entry")
    return chi


def spectrogram_posterior(model: GllimModel, spec: BinauralSpectrogram,
                          use_activity: bool = True) -> PosteriorGmm:
    """
    Posterior mixture over directions given a (possibly sparse) spectrogram.

    The per-(d, t) sums are accumulated with compensated summation: first over
    frames for every (k, d), then over feature dimensions.  Masked entries never
    enter an arithmetic operation, so their values cannot change the result.
    With use_activity=False every entry is treated as observed.
    """
    chi = _active(model, spec, use_activity)
    Y = spec.features
    K, L, D = model.K, model.L, model.D

    # sums over t of chi * (y - b) and chi * (y - b)^2, per component and dimension
    lin_t = CompensatedSum((K, D))
    quad_t = CompensatedSum((K, D))
    for t in range(spec.T):
        residual = np.where(chi[:, t], Y[:, t] - model.b, 0.0)
        lin_t.add(residual)
        quad_t.add(residual * residual)
    counts = chi.sum(axis=1).astype(np.float64)

    inv_var = 1.0 / model.sigma2
    weighted = lin_t.value * inv_var
    squared = quad_t.value
    precision_d = CompensatedSum((K, L, L))
    linear_d = CompensatedSum((K, L))
    quad_d = CompensatedSum((K,))
    for d in np.flatnonzero(counts):
        a = model.A[:, d, :]
        precision_d.add((counts[d] * inv_var[d]) * a[:, :, None] * a[:, None, :])
        linear_d.add(a * weighted[:, d, None])
        quad_d.add(squared[:, d] * inv_var[d])

    data_precision, data_linear, data_quad = precision_d.value, linear_d.value, quad_d.value
    log_w = np.empty(K)
    means = np.empty((K, L))
    covs = np.empty((K, L, L))
    for k in range(K):
        gamma_chol = scipy.linalg.cho_factor(model.Gamma[k], lower=True)
        gamma_inv = scipy.linalg.cho_solve(gamma_chol, np.eye(L))
        prior_term = gamma_inv @ model.c[k]
        precision = symmetrize(gamma_inv + data_precision[k])
        prec_chol = scipy.linalg.cho_factor(precision, lower=True)
        h = prior_term + data_linear[k]
        covs[k] = symmetrize(scipy.linalg.cho_solve(prec_chol, np.eye(L)))
        means[k] = scipy.linalg.cho_solve(prec_chol, h)
        log_det_v = -2.0 * np.sum(np.log(np.diag(prec_chol[0])))
        log_det_gamma = 2.0 * np.sum(np.log(np.diag(gamma_chol[0])))
        log_w[k] = (np.log(model.pi[k]) + 0.5 * (log_det_v - log_det_gamma)
                    - 0.5 * (data_quad[k] + model.c[k] @ prior_term - means[k] @ h))

    return PosteriorGmm(log_weights=normalize_log_weights(log_w), means=means, covs=covs)


def posterior_mean(gmm: PosteriorGmm) -> np.ndarray:
    """Mean of the posterior mixture"""
    return gmm.weights @ gmm.means


@dataclass(frozen=True)
class LocalizationReport:
    num_sources: int
    estimate: np.ndarray
    gmm: PosteriorGmm
    active_fraction: float
    elapsed_ms: float

    def to_dict(self, include_timing: bool = True) -> Dict[str, Any]:
        report = {
            'version': REPORT_FORMAT_VERSION,
            'num_sources': self.num_sources,
            'estimate': self.estimate.tolist(),
            'gmm': self.gmm.to_list(),
            'active_fraction': self.active_fraction,
        }
        if include_timing:
            report['elapsed_ms'] = self.elapsed_ms
        return report


def localize(model: GllimModel, spec: BinauralSpectrogram, use_activity: bool = True) -> LocalizationReport:
    """Posterior expectation of the source directions, with the full mixture"""
    if model.L % 2:
        raise ValueError(f"direction dimension L={model.L} is not a multiple of 2")
    start = time.perf_counter()
    gmm = spectrogram_posterior(model, spec, use_activity)
    estimate = posterior_mean(gmm)
    elapsed_ms = (time.perf_counter() - start) * 1000.0

    if model.bounds is not None:
        outside = (estimate < model.bounds[0]) | (estimate > model.bounds[1])
        if np.any(outside):
            logger.warning(f"Estimate {np.round(estimate, 2).tolist()} lies outside the trained field of view")
    active = spec.active_fraction if use_activity else 1.0
    return LocalizationReport(model.L // 2, estimate, gmm, active, elapsed_ms)


@dataclass(frozen=True)
class GridSpec:
    """Per-axis bounds and node counts of a regular quadrature grid"""
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    nodes: Tuple[int, ...]

    def __post_init__(self):
        if not len(self.lower) == len(self.upper) == len(self.nodes):
            raise ValueError("grid bounds and node counts must have one entry per axis")
        if any(n < 2 for n in self.nodes):
            raise ValueError("grid needs at least 2 nodes per axis")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("grid upper bounds must exceed lower bounds")

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.nodes) - 1)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=1)


def default_grid(model: GllimModel, nodes: int = 101, padding: float = 0.1) -> GridSpec:
    """Training bounding box padded by a fraction of its extent on every side"""
    if model.bounds is not None:
        lo, hi = model.bounds
    else:
        spread = 4.0 * np.sqrt(np.einsum('kll->kl', model.Gamma))
        lo, hi = (model.c - spread).min(axis=0), (model.c + spread).max(axis=0)
    pad = padding * np.maximum(hi - lo, 1e-6)
    return GridSpec(tuple((lo - pad).tolist()), tuple((hi + pad).tolist()), (nodes,) * model.L)


@dataclass(frozen=True)
class OracleResult:
    nodes: np.ndarray
    probabilities: np.ndarray
    mean: np.ndarray
    component_weights: np.ndarray
    spacing: np.ndarray


def grid_oracle_posterior(model: GllimModel, spec: BinauralSpectrogram, grid: Optional[GridSpec] = None,
                          use_activity: bool = True) -> OracleResult:
    """
    Bayes' rule evaluated node by node: pi_k N(x; c_k, Gamma_k) prod N(y'_dt; a_dk^T x + b_dk, sigma2_d)
    over the active entries, normalised by quadrature over the grid.
    """
    if model.L > 2:
        raise ValueError(f"grid oracle supports L <= 2, got L={model.L}")
    chi = _active(model, spec, use_activity)
    grid = grid or default_grid(model)
    if len(grid.nodes) != model.L:
        raise ValueError(f"grid has {len(grid.nodes)} axes, model has L={model.L}")

    points = grid.points()
    log_joint = np.empty((model.K, points.shape[0]))
    for k in range(model.K):
        predicted = points @ model.A[k].T + model.b[k]
        log_lik = np.zeros(points.shape[0])
        for t in range(spec.T):
            observed = chi[:, t]
            if not np.any(observed):
                continue
            r = spec.features[observed, t] - predicted[:, observed]
            var = model.sigma2[observed]
            log_lik -= 0.5 * (np.sum(r * r / var, axis=1) + np.sum(np.log(var)) + observed.sum() * LOG_2PI)
        log_joint[k] = np.log(model.pi[k]) + log_gauss_full(points, model.c[k], model.Gamma[k]) + log_lik

    log_total = logsumexp(log_joint, axis=0)
    log_norm = logsumexp(log_total)
    probabilities = np.exp(log_total - log_norm)
    return OracleResult(
        nodes=points,
        probabilities=probabilities,
        mean=probabilities @ points,
        component_weights=np.exp(logsumexp(log_joint, axis=1) - log_norm),
        spacing=grid.spacing,
    )


def random_instance(rng: np.random.Generator, D: int, T: int, K: int, L: int = 2,
                    active_fraction: float = 0.7) -> Tuple[GllimModel, BinauralSpectrogram]:
    """Small random model and a spectrogram drawn from it, with a random activity pattern"""
    pi = rng.dirichlet(np.full(K, 2.0))
    c = rng.uniform(-4.0, 4.0, size=(K, L))
    Gamma = np.empty((K, L, L))
    for k in range(K):
        q, _ = np.linalg.qr(rng.normal(size=(L, L)))
        Gamma[k] = symmetrize((q * rng.uniform(1.0, 2.0, size=L) ** 2) @ q.T)
    A = rng.normal(0.0, 0.25, size=(K, D, L))
    b = rng.normal(0.0, 1.0, size=(K, D))
    sigma2 = rng.uniform(0.5, 1.5, size=D)
    model = GllimModel(pi=pi, c=c, Gamma=Gamma, A=A, b=b, sigma2=sigma2, prior_mode=PriorMode.FREE,
                       bounds=np.stack([np.full(L, -11.0), np.full(L, 11.0)]))

    k = rng.choice(K, p=pi)
    x = rng.multivariate_normal(c[k], Gamma[k])
    features = (A[k] @ x + b[k])[:, None] + rng.normal(size=(D, T)) * np.sqrt(sigma2)[:, None]
    activity = rng.random((D, T)) < active_fraction
    activity.flat[rng.integers(D * T)] = True
    return model, BinauralSpectrogram(features, activity, D, Cue.ILD)


@dataclass(frozen=True)
class OracleCheck:
    trials: int
    max_mean_error: float
    max_mean_error_spacings: float
    max_weight_error: float
    passed: bool


def oracle_check(trials: int = 50, seed: int = 0, max_D: int = 8, max_T: int = 5, max_K: int = 3,
                 nodes: int = 101) -> OracleCheck:
    """Closed-form posterior against the grid oracle on random small single-source instances"""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst_mean = worst_spacings = worst_weight = 0.0
    for trial in range(1, trials + 1):
        D = int(rng.integers(1, max_D + 1))
        T = int(rng.integers(1, max_T + 1))
        K = int(rng.integers(1, max_K + 1))
        model, spec = random_instance(rng, D, T, K)
        gmm = spectrogram_posterior(model, spec)
        oracle = grid_oracle_posterior(model, spec, default_grid(model, nodes))
        error = float(np.linalg.norm(posterior_mean(gmm) - oracle.mean))
        worst_mean = max(worst_mean, error)
        worst_spacings = max(worst_spacings, error / float(oracle.spacing.max()))
        worst_weight = max(worst_weight, float(np.max(np.abs(gmm.weights - oracle.component_weights))))
        log_progress(logger, trial, trials, "oracle trials")
    passed = worst_spacings < 2.0 and worst_weight < 1e-3
    return OracleCheck(trials, worst_mean, worst_spacings, worst_weight, passed)
