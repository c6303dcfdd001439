"""
Gaussian locally-linear mapping from source directions to binaural features.

A K-component mixture of affine maps y = A_k x + b_k + e, with Gaussian regions
N(x; c_k, Gamma_k) in direction space and a shared diagonal noise Sigma.  The
model is trained low-to-high (directions to features) by EM and inverted in
closed form.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .utils.logger import setup_logger
from .utils.numerics import (LOG_2PI, floor_eigenvalues, log_gauss_full, normalize_log_weights,
                             symmetrize)
from .utils.parallel import ordered_map

logger = setup_logger(__name__)

MODEL_FORMAT_VERSION = 1
MAX_RESEEDS = 10
SIGMA2_FLOOR_SCALE = 1e-8
GAMMA_FLOOR_SCALE = 1e-8
ABSOLUTE_FLOOR = 1e-12


class PriorMode(Enum):
    """How the region priors pi_k are handled by the M-step"""
    FREE = "free"
    FIXED = "fixed"


class MappingDirection(Enum):
    LOW_TO_HIGH = "low_to_high"
    HIGH_TO_LOW = "high_to_low"


def count_parameters(D: int, L: int, K: int,
                     direction: MappingDirection = MappingDirection.LOW_TO_HIGH,
                     include_noise: bool = False) -> int:
    """
    Number of free parameters of a K-component locally-linear mapping.

    Low-to-high counts per component pi_k, c_k, Gamma_k (symmetric), A_k and b_k;
    high-to-low swaps the roles of D and L, which puts a D x D covariance in
    every component.  include_noise adds the shared diagonal Sigma.
    """
    if min(D, L, K) <= 0:
        raise ValueError("D, L and K must all be positive")
    if direction is MappingDirection.LOW_TO_HIGH:
        per_component = 1 + L + L * (L + 1) // 2 + D * L + D
        noise = D
    else:
        per_component = 1 + D + D * (D + 1) // 2 + L * D + L
        noise = L
    return K * per_component + (noise if include_noise else 0)


@dataclass
class TrainingSet:
    """N direction / mean-feature pairs: X is N x L (degrees), Y is N x D"""
    X: np.ndarray
    Y: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("training set contains non-finite values")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def L(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> int:
        return self.Y.shape[1]

    def subset(self, indices: np.ndarray) -> 'TrainingSet':
        meta = dict(self.metadata, subset_of=self.N)
        return TrainingSet(self.X[indices], self.Y[indices], meta)

    def save(self, path: Path) -> None:
        with open(path, 'wb') as f:
            np.savez(f, X=self.X, Y=self.Y, metadata=np.array(json.dumps(self.metadata, sort_keys=True)))

    @classmethod
    def load(cls, path: Path) -> 'TrainingSet':
        with np.load(path, allow_pickle=False) as data:
            metadata = json.loads(str(data['metadata']))
            return cls(data['X'], data['Y'], metadata)


@dataclass(frozen=True)
class Floors:
    """Lower bounds for the noise variances and the region covariance spectra"""
    sigma2: float
    gamma: float


def variance_floors(train: TrainingSet) -> Floors:
    """Floors scaled to the spread of the training features and directions"""
    sigma2 = SIGMA2_FLOOR_SCALE * float(np.mean(np.var(train.Y, axis=0)))
    cov_x = np.atleast_2d(np.cov(train.X, rowvar=False, bias=True))
    gamma = GAMMA_FLOOR_SCALE * float(np.trace(cov_x)) / train.L
    return Floors(sigma2=max(sigma2, ABSOLUTE_FLOOR), gamma=max(gamma, ABSOLUTE_FLOOR))


@dataclass(frozen=True)
class Responsibilities:
    """N x K posteriors r_kn and the log-likelihood of the model that produced them"""
    R: np.ndarray
    log_likelihood: float


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 200
    rel_tol: float = 1e-6
    prior_mode: PriorMode = PriorMode.FREE
    seed: int = 0
    threads: int = 1


@dataclass
class GllimModel:
    """Trained parameters {c_k, Gamma_k, pi_k, A_k, b_k}, Sigma"""
    pi: np.ndarray
    c: np.ndarray
    Gamma: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sigma2: np.ndarray
    prior_mode: PriorMode = PriorMode.FREE
    bounds: Optional[np.ndarray] = None
    history: List[float] = field(default_factory=list, compare=False)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def L(self) -> int:
        return self.c.shape[1]

    @property
    def D(self) -> int:
        return self.sigma2.shape[0]

    @property
    def n_parameters(self) -> int:
        return count_parameters(self.D, self.L, self.K, include_noise=True)

    def validate(self) -> None:
        K, L, D = self.K, self.L, self.D
        expected = {'c': (K, L), 'Gamma': (K, L, L), 'A': (K, D, L), 'b': (K, D)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-10:
            raise ValueError("priors must be positive and sum to 1")
        if np.any(self.sigma2 <= 0):
            raise ValueError("noise variances must be positive")

    def to_dict(self) -> Dict[str, Any]:
        components = [
            {
                'pi': float(self.pi[k]),
                'c': self.c[k].tolist(),
                'Gamma': self.Gamma[k].ravel().tolist(),
                'A': self.A[k].ravel().tolist(),
                'b': self.b[k].tolist(),
            }
            for k in range(self.K)
        ]
        data: Dict[str, Any] = {
            'version': MODEL_FORMAT_VERSION,
            'K': self.K,
            'L': self.L,
            'D': self.D,
            'prior_mode': self.prior_mode.value,
            'components': components,
            'sigma2': self.sigma2.tolist(),
        }
        if self.bounds is not None:
            data['bounds'] = self.bounds.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GllimModel':
        if data.get('version') != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {data.get('version')}")
        K, L, D = int(data['K']), int(data['L']), int(data['D'])
        comps = data['components']
        if len(comps) != K:
            raise ValueError(f"model declares K={K} but lists {len(comps)} components")
        model = cls(
            pi=np.array([comp['pi'] for comp in comps], dtype=np.float64),
            c=np.array([comp['c'] for comp in comps], dtype=np.float64).reshape(K, L),
            Gamma=np.array([comp['Gamma'] for comp in comps], dtype=np.float64).reshape(K, L, L),
            A=np.array([comp['A'] for comp in comps], dtype=np.float64).reshape(K, D, L),
            b=np.array([comp['b'] for comp in comps], dtype=np.float64).reshape(K, D),
            sigma2=np.array(data['sigma2'], dtype=np.float64),
            prior_mode=PriorMode(data['prior_mode']),
            bounds=np.array(data['bounds'], dtype=np.float64) if 'bounds' in data else None,
        )
        model.validate()
        return model

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: Path) -> 'GllimModel':
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, ValueError) as e:
            logger.error(f"Failed to load model {path}: {str(e)}")
            raise ValueError(f"{path}: {e}") from e


def _component_estimate(w: np.ndarray, X: np.ndarray, Y: np.ndarray, Y2: np.ndarray,
                        floors: Floors) -> Tuple[np.ndarray, ...]:
    """
    Weighted mean/covariance of X and weighted least squares of Y on X for one component.

    Y is centred column-wise and Y2 holds its squares; the weighted residual energy
    per feature is expanded in moments so no N x D residual is formed.
    """
    mass = w.sum()
    c = w @ X / mass
    dx = X - c
    wdx = w[:, None] * dx
    cxx = symmetrize(wdx.T @ dx / mass)
    y_mean = w @ Y / mass
    cxy = wdx.T @ Y / mass
    A = np.linalg.lstsq(cxx, cxy, rcond=None)[0].T
    b = y_mean - A @ c
    var_y = w @ Y2 / mass - y_mean * y_mean
    sq = mass * (var_y - 2.0 * np.einsum('dl,ld->d', A, cxy) + np.einsum('dl,lm,dm->d', A, cxx, A))
    return c, floor_eigenvalues(cxx, floors.gamma), A, b, np.maximum(sq, 0.0)


def _estimate(R: np.ndarray, train: TrainingSet, prior_mode: PriorMode, floors: Floors,
              threads: int = 1) -> GllimModel:
    mass = R.sum(axis=0)
    K = R.shape[1]
    y_center = train.Y.mean(axis=0)
    Y = train.Y - y_center
    Y2 = Y * Y
    parts = ordered_map(lambda k: _component_estimate(R[:, k], train.X, Y, Y2, floors), range(K), threads)
    total = float(mass.sum())
    if prior_mode is PriorMode.FIXED:
        pi = np.full(K, 1.0 / K)
    else:
        pi = mass / total
    sigma2 = np.maximum(sum(p[4] for p in parts) / total, floors.sigma2)
    return GllimModel(
        pi=pi,
        c=np.stack([p[0] for p in parts]),
        Gamma=np.stack([p[1] for p in parts]),
        A=np.stack([p[2] for p in parts]),
        b=np.stack([p[3] for p in parts]) + y_center,
        sigma2=sigma2,
        prior_mode=prior_mode,
        bounds=np.stack([train.X.min(axis=0), train.X.max(axis=0)]),
    )


def _kmeans_state(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def _merge_small_clusters(labels: np.ndarray, centers: np.ndarray, X: np.ndarray, min_size: int) -> np.ndarray:
    """Move the points of clusters smaller than min_size to the nearest surviving centre; relabels 0..K'-1"""
    counts = np.bincount(labels, minlength=centers.shape[0])
    keep = np.flatnonzero(counts >= min_size)
    if keep.size == 0:
        raise RuntimeError(f"k-means found no cluster with at least {min_size} points")
    distances = np.linalg.norm(X[:, None, :] - centers[None, keep, :], axis=2)
    remap = np.full(centers.shape[0], -1)
    remap[keep] = np.arange(keep.size)
    merged = remap[labels]
    stray = merged < 0
    merged[stray] = np.argmin(distances[stray], axis=1)
    return merged


def init_params(train: TrainingSet, K: int, seed: int = 0, prior_mode: PriorMode = PriorMode.FREE,
                floors: Optional[Floors] = None) -> GllimModel:
    """
    k-means++ partition of the directions, then one closed-form estimate per cluster.

    Every cluster must hold at least L + 1 points.  Up to MAX_RESEEDS partitions
    are tried; if none qualifies, the small clusters of the last one are merged
    into their nearest neighbours and K shrinks accordingly.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if train.N < K * (train.L + 1):
        raise ValueError(f"N={train.N} is too small for K={K} components (need >= {K * (train.L + 1)})")
    floors = floors or variance_floors(train)
    min_size = train.L + 1

    for attempt in range(MAX_RESEEDS):
        kmeans = KMeans(n_clusters=K, init='k-means++', n_init=1, random_state=_kmeans_state(seed, attempt))
        labels = kmeans.fit_predict(train.X)
        counts = np.bincount(labels, minlength=K)
        if counts.min() >= min_size:
            break
        logger.debug(f"k-means left {np.count_nonzero(counts < min_size)} clusters below {min_size} points, "
                     f"re-seeding ({attempt + 1}/{MAX_RESEEDS})")
    else:
        labels = _merge_small_clusters(labels, kmeans.cluster_centers_, train.X, min_size)
        logger.warning(f"k-means clusters below {min_size} points after {MAX_RESEEDS} seeds, "
                       f"merged them: K={labels.max() + 1}")

    R = np.zeros((train.N, labels.max() + 1))
    R[np.arange(train.N), labels] = 1.0
    return _estimate(R, train, prior_mode, floors)


def _log_joint(model: GllimModel, X: np.ndarray, Y: np.ndarray, threads: int = 1) -> np.ndarray:
    """
    N x K matrix of log pi_k + log N(x; c_k, Gamma_k) + log N(y; A_k x + b_k, Sigma).

    The feature residual is expanded about the data means, so each component costs
    an N x D by D x L product instead of a fresh N x D residual.
    """
    x_center, y_center = X.mean(axis=0), Y.mean(axis=0)
    dx = X - x_center
    dy = Y - y_center
    scaled = dy / model.sigma2
    yy = np.einsum('nd,nd->n', scaled, dy)
    const = -0.5 * (model.D * LOG_2PI + float(np.sum(np.log(model.sigma2))))

    def column(k: int) -> np.ndarray:
        A = model.A[k]
        offset = A @ x_center + model.b[k] - y_center
        a_scaled = A.T / model.sigma2
        cross = np.einsum('nl,nl->n', scaled @ A, dx) + scaled @ offset
        fitted = (np.einsum('nl,lm,nm->n', dx, a_scaled @ A, dx) + 2.0 * dx @ (a_scaled @ offset)
                  + offset @ (offset / model.sigma2))
        quad = yy - 2.0 * cross + fitted
        return math.log(model.pi[k]) + log_gauss_full(X, model.c[k], model.Gamma[k]) + const - 0.5 * quad

    return np.column_stack(ordered_map(column, range(model.K), threads))


def _check_dims(model: GllimModel, train: TrainingSet) -> None:
    if (train.L, train.D) != (model.L, model.D):
        raise ValueError(f"training set is L={train.L}, D={train.D} but model is L={model.L}, D={model.D}")


def e_step(model: GllimModel, train: TrainingSet, threads: int = 1) -> Responsibilities:
    """Posterior component memberships r_kn of every training pair under model"""
    _check_dims(model, train)
    log_joint = _log_joint(model, train.X, train.Y, threads)
    per_point = logsumexp(log_joint, axis=1)
    R = np.exp(log_joint - per_point[:, None])
    return Responsibilities(R=R, log_likelihood=math.fsum(per_point))


def m_step(resp: Responsibilities, train: TrainingSet, prior_mode: PriorMode = PriorMode.FREE,
           floors: Optional[Floors] = None, threads: int = 1) -> GllimModel:
    """Closed-form maximisation; components with mass below L + 1 are removed"""
    floors = floors or variance_floors(train)
    mass = resp.R.sum(axis=0)
    keep = mass >= train.L + 1
    if not np.any(keep):
        raise RuntimeError("training collapsed")
    if not np.all(keep):
        logger.warning(f"Pruned {np.count_nonzero(~keep)} degenerate components, K={np.count_nonzero(keep)}")
    return _estimate(resp.R[:, keep], train, prior_mode, floors, threads)


def log_likelihood(model: GllimModel, train: TrainingSet, threads: int = 1) -> float:
    """Observed-data log-likelihood, summed with math.fsum"""
    _check_dims(model, train)
    return math.fsum(logsumexp(_log_joint(model, train.X, train.Y, threads), axis=1))


def fit(train: TrainingSet, K: int, config: FitConfig = FitConfig()) -> GllimModel:
    """
    EM until the relative log-likelihood gain drops below rel_tol or max_iter is reached.

    The history starts once every component of the initial model keeps at least
    L + 1 responsibility mass, so the first recorded M-step prunes nothing.
    """
    floors = variance_floors(train)
    model = init_params(train, K, config.seed, config.prior_mode, floors)
    resp = e_step(model, train, config.threads)
    while np.any(resp.R.sum(axis=0) < train.L + 1):
        model = m_step(resp, train, config.prior_mode, floors, config.threads)
        resp = e_step(model, train, config.threads)
    history = [resp.log_likelihood]
    logger.info(f"Training K={model.K} on N={train.N} pairs (L={train.L}, D={train.D})")

    for iteration in range(1, config.max_iter + 1):
        model = m_step(resp, train, config.prior_mode, floors, config.threads)
        resp = e_step(model, train, config.threads)
        prev, current = history[-1], resp.log_likelihood
        history.append(current)
        if current < prev - 1e-9 * abs(prev):
            logger.warning(f"Log-likelihood decreased at iteration {iteration}: {prev:.6f} -> {current:.6f}")
        if iteration % 10 == 0:
            logger.info(f"Iteration {iteration}: log-likelihood {current:.6f}, K={model.K}")
        if abs(current - prev) <= config.rel_tol * abs(prev):
            logger.info(f"Converged after {iteration} iterations, K={model.K}")
            break

    model.history = history
    return model


@dataclass(frozen=True)
class InverseParams:
    """
    Starred parameters of the inverse conditional p(x | y).

    Gamma*_k = Sigma + A_k Gamma_k A_k^T is D x D, so it is never stored: densities
    use the Woodbury identity and gamma_star() builds a dense copy on request.
    """
    c_star: np.ndarray
    A_star: np.ndarray
    b_star: np.ndarray
    Sigma_star: np.ndarray
    log_det_gamma_star: np.ndarray
    A: np.ndarray
    Gamma: np.ndarray
    sigma2: np.ndarray

    def gamma_star(self, k: int) -> np.ndarray:
        return np.diag(self.sigma2) + self.A[k] @ self.Gamma[k] @ self.A[k].T

    def log_density(self, y: np.ndarray) -> np.ndarray:
        """log N(y; c*_k, Gamma*_k) for every component"""
        D = self.sigma2.shape[0]
        out = np.empty(self.c_star.shape[0])
        for k in range(out.shape[0]):
            u = y - self.c_star[k]
            v = self.A[k].T @ (u / self.sigma2)
            quad = np.sum(u * u / self.sigma2) - v @ self.Sigma_star[k] @ v
            out[k] = -0.5 * (D * LOG_2PI + self.log_det_gamma_star[k] + quad)
        return out


def inverse_density_params(model: GllimModel) -> InverseParams:
    """Starred parameters of p(x | y) for every component"""
    c_star, A_star, b_star, Sigma_star, log_det = [], [], [], [], []
    log_det_sigma = float(np.sum(np.log(model.sigma2)))
    for k in range(model.K):
        try:
            chol = scipy.linalg.cho_factor(model.Gamma[k])
        except np.linalg.LinAlgError as e:
            raise ValueError(f"region covariance of component {k} is singular") from e
        gamma_inv = scipy.linalg.cho_solve(chol, np.eye(model.L))
        at_si = model.A[k].T / model.sigma2
        s_star = symmetrize(np.linalg.inv(gamma_inv + at_si @ model.A[k]))
        c_star.append(model.A[k] @ model.c[k] + model.b[k])
        A_star.append(s_star @ at_si)
        b_star.append(s_star @ (gamma_inv @ model.c[k] - at_si @ model.b[k]))
        Sigma_star.append(s_star)
        log_det_gamma = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        log_det.append(log_det_sigma + log_det_gamma - np.linalg.slogdet(s_star)[1])
    return InverseParams(
        c_star=np.stack(c_star), A_star=np.stack(A_star), b_star=np.stack(b_star),
        Sigma_star=np.stack(Sigma_star), log_det_gamma_star=np.array(log_det),
        A=model.A, Gamma=model.Gamma, sigma2=model.sigma2,
    )


def inverse_conditional(model: GllimModel, y: np.ndarray,
                        params: Optional[InverseParams] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixture p(x | y): (log weights, component means A*_k y + b*_k, covariances Sigma*_k)"""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.D,):
        raise ValueError(f"feature vector has shape {y.shape}, expected ({model.D},)")
    params = params or inverse_density_params(model)
    log_w = normalize_log_weights(np.log(model.pi) + params.log_density(y))
    means = np.einsum('kld,d->kl', params.A_star, y) + params.b_star
    return log_w, means, params.Sigma_star


def inverse_predict(model: GllimModel, y: np.ndarray, params: Optional[InverseParams] = None) -> np.ndarray:
    """Mean of p(x | y)"""
    log_w, means, _ = inverse_conditional(model, y, params)
    return np.exp(log_w) @ means


def forward_predict(model: GllimModel, x: np.ndarray) -> np.ndarray:
    """Mean of p(y | x)"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.L,):
        raise ValueError(f"direction vector has shape {x.shape}, expected ({model.L},)")
    log_w = np.array([math.log(model.pi[k]) + log_gauss_full(x, model.c[k], model.Gamma[k])[0]
                      for k in range(model.K)])
    w = np.exp(normalize_log_weights(log_w))
    return np.einsum('k,kd->d', w, np.einsum('kdl,l->kd', model.A, x) + model.b)
