"""Log-domain Gaussian densities and compensated summation"""

import math

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class CompensatedSum:
    """Running Kahan-Babuska sum of equally shaped arrays, added one term at a time"""

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self.compensation = np.zeros(shape)

    def add(self, term: np.ndarray) -> None:
        t = self.total + term
        big = np.abs(self.total) >= np.abs(term)
        self.compensation += np.where(big, (self.total - t) + term, (term - t) + self.total)
        self.total = t

    @property
    def value(self) -> np.ndarray:
        return self.total + self.compensation


def kahan_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """
    Compensated (Kahan-Babuska) sum along one axis.

    The loop runs over the reduced axis in index order and is vectorised over
    every other axis, so the result does not depend on thread scheduling.
    """
    values = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    acc = CompensatedSum(values.shape[1:])
    for term in values:
        acc.add(term)
    return acc.value


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Average of a matrix and its transpose"""
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def floor_eigenvalues(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Clip the spectrum of a symmetric matrix from below"""
    vals, vecs = np.linalg.eigh(symmetrize(matrix))
    if vals.min() >= floor:
        return symmetrize(matrix)
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)


def log_gauss_full(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x; mean, cov) for the rows of x, cov full L x L"""
    x = np.atleast_2d(x)
    chol = scipy.linalg.cholesky(cov, lower=True)
    diff = x - mean
    z = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    L = mean.shape[-1]
    return -0.5 * (L * LOG_2PI + log_det + np.sum(z * z, axis=0))


def normalize_log_weights(log_w: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalise log weights with log-sum-exp; returns log probabilities"""
    return log_w - logsumexp(log_w, axis=axis, keepdims=True)
