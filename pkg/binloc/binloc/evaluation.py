"""Localization error metrics and the GCC-PHAT histogram baseline"""

import itertools
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
from scipy import stats

from .spectro import ComplexSpectrogram, stft
from .utils.logger import setup_logger

logger = setup_logger(__name__)

AXES = ('azimuth', 'elevation')
REGRESSOR_FORMAT_VERSION = 1
PHAT_BIN_WIDTH = 0.5
PHAT_UPSAMPLING = 8


def _split_sources(x: np.ndarray, M: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size != 2 * M:
        raise ValueError(f"direction vector has {x.size} entries, expected {2 * M} for M={M}")
    return x.reshape(M, 2)


def assign_sources(estimate: np.ndarray, truth: np.ndarray, M: int) -> Tuple[np.ndarray, bool]:
    """
    Reorder the estimated sources to match the true ones with the smallest
    total angular distance.  Returns the reordered M x 2 estimate and whether
    the assignment crossed the given order.
    """
    est, tru = _split_sources(estimate, M), _split_sources(truth, M)
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(M)):
        cost = float(np.sum(np.linalg.norm(np.nan_to_num(est[list(perm)] - tru), axis=1)))
        if cost < best_cost:
            best, best_cost = perm, cost
    return est[list(best)], list(best) != list(range(M))


def gtea(estimate: np.ndarray, truth: np.ndarray, M: int = 1) -> np.ndarray:
    """Ground-truth-to-estimate angle: M x 2 absolute (azimuth, elevation) errors in degrees"""
    matched, _ = assign_sources(estimate, truth, M)
    return np.abs(matched - _split_sources(truth, M))


@dataclass(frozen=True)
class ErrorSummary:
    """Per-axis mean and population std over inliers, plus the outlier rate"""
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    outlier_percent: float
    threshold: float
    count: int
    inliers: int

    def to_dict(self, axes: Sequence[str] = AXES) -> Dict[str, Any]:
        def clean(value: float) -> Optional[float]:
            return None if math.isnan(value) else value

        out: Dict[str, Any] = {
            'count': self.count,
            'inliers': self.inliers,
            'threshold': self.threshold if math.isfinite(self.threshold) else None,
            'outlier_percent': self.outlier_percent,
        }
        names = axes if len(self.mean) > 1 else ('error',)
        for name, mean, std in zip(names, self.mean, self.std):
            out[name] = {'mean': clean(mean), 'std': clean(std)}
        return out


def _column_stat(fn, column: np.ndarray) -> float:
    return float(fn(column)) if np.any(np.isfinite(column)) else math.nan


def summarize(errors: Sequence, threshold: float) -> ErrorSummary:
    """
    Split errors into inliers (distance <= threshold) and outliers.  Accepts
    scalar errors or rows of per-axis errors.
    """
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no errors to summarize")
    if values.ndim == 1:
        values = values[:, None]
    norms = np.sqrt(np.nansum(values * values, axis=1))
    inlier = norms <= threshold
    n_in = int(np.count_nonzero(inlier))
    if n_in:
        kept = values[inlier]
        mean = tuple(_column_stat(np.nanmean, col) for col in kept.T)
        std = tuple(_column_stat(np.nanstd, col) for col in kept.T)
    else:
        mean = std = (math.nan,) * values.shape[1]
    outliers = 100.0 * (len(values) - n_in) / len(values)
    return ErrorSummary(mean, std, outliers, float(threshold), len(values), n_in)


@dataclass(frozen=True)
class PhatHistogram:
    centers: np.ndarray
    counts: np.ndarray
    frame_delays: np.ndarray

    def peaks(self, num_peaks: int = 1) -> List[float]:
        """Largest local maxima, each refined by a parabola through its neighbouring bins"""
        counts = np.concatenate([[0.0], self.counts, [0.0]])
        is_peak = (counts[1:-1] > 0) & (counts[1:-1] >= counts[:-2]) & (counts[1:-1] >= counts[2:])
        order = [i for i in np.argsort(-self.counts, kind='stable') if is_peak[i]]
        delays: List[float] = []
        taken: List[int] = []
        for i in order:
            if len(delays) == num_peaks:
                break
            if any(abs(i - j) <= 2 for j in taken):
                continue
            taken.append(i)
            left, mid, right = counts[i], counts[i + 1], counts[i + 2]
            curvature = left - 2.0 * mid + right
            offset = 0.5 * (left - right) / curvature if curvature < 0 else 0.0
            delays.append(float(self.centers[i] + offset * PHAT_BIN_WIDTH))
        return delays


def _parabolic(values: np.ndarray, index: int) -> float:
    if index <= 0 or index >= len(values) - 1:
        return float(index)
    left, mid, right = values[index - 1], values[index], values[index + 1]
    curvature = left - 2.0 * mid + right
    return index + (0.5 * (left - right) / curvature if curvature < 0 else 0.0)


def phat_histogram(left: ComplexSpectrogram, right: ComplexSpectrogram, max_lag: float) -> PhatHistogram:
    """
    Per-frame GCC-PHAT peaks pooled into a histogram of 0.5-sample bins over
    [-max_lag, max_lag].  The delay is positive when the right channel lags.
    """
    if left.data.shape != right.data.shape:
        raise ValueError("left and right spectrograms differ in shape")
    if max_lag <= 0:
        raise ValueError("max_lag must be > 0")
    n_fft = left.window_len
    n_up = n_fft * PHAT_UPSAMPLING
    reach = int(math.ceil(max_lag * PHAT_UPSAMPLING))
    if reach >= n_up // 2:
        raise ValueError(f"max_lag={max_lag} exceeds half the window ({n_fft // 2} samples)")

    cross = right.data * np.conj(left.data)
    magnitude = np.abs(cross)
    active_frames = np.flatnonzero(np.any(magnitude > 0, axis=0))
    if active_frames.size == 0:
        raise ValueError("no signal")

    whitened = np.where(magnitude > 0, cross / np.where(magnitude > 0, magnitude, 1.0), 0.0)
    spectrum = np.zeros((n_fft // 2 + 1, active_frames.size), dtype=np.complex128)
    spectrum[1:1 + left.F] = whitened[:, active_frames]
    cc = scipy.fft.irfft(spectrum, n=n_up, axis=0)
    window = np.concatenate([cc[-reach:], cc[:reach + 1]], axis=0)
    lags = np.arange(-reach, reach + 1) / PHAT_UPSAMPLING

    frame_delays = np.empty(active_frames.size)
    for t in range(active_frames.size):
        column = window[:, t]
        peak = _parabolic(column, int(np.argmax(column)))
        frame_delays[t] = lags[0] + peak / PHAT_UPSAMPLING

    half = math.ceil(max_lag / PHAT_BIN_WIDTH) * PHAT_BIN_WIDTH
    centers = np.arange(-half, half + PHAT_BIN_WIDTH / 2, PHAT_BIN_WIDTH)
    edges = np.concatenate([centers - PHAT_BIN_WIDTH / 2, [centers[-1] + PHAT_BIN_WIDTH / 2]])
    counts, _ = np.histogram(np.clip(frame_delays, -half, half), bins=edges)
    return PhatHistogram(centers, counts.astype(np.float64), frame_delays)


def phat_tdoas(left: ComplexSpectrogram, right: ComplexSpectrogram, max_lag: float,
               num_sources: int = 1) -> List[float]:
    """Delays of the num_sources dominant histogram peaks, strongest first"""
    delays = phat_histogram(left, right, max_lag).peaks(num_sources)
    if len(delays) < num_sources:
        logger.warning(f"PHAT histogram has {len(delays)} peaks, {num_sources} requested")
    return delays


def _time_domain_spectra(left: np.ndarray, right: np.ndarray, max_lag: float, window_len: int,
                         hop: int) -> Tuple[ComplexSpectrogram, ComplexSpectrogram]:
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 1:
        raise ValueError("left and right must be 1-D signals of equal length")
    if left.size < 2 * max_lag:
        raise ValueError(f"signals must hold at least 2 x max_lag = {2 * max_lag} samples")
    if not (np.any(left) and np.any(right)):
        raise ValueError("no signal")
    window_len = min(window_len, left.size - left.size % 2)
    hop = min(hop, window_len)
    return stft(left, window_len, hop), stft(right, window_len, hop)


def gcc_phat_tdoa(left: np.ndarray, right: np.ndarray, max_lag: float, window_len: int = 1024,
                  hop: int = 512) -> float:
    """Fractional delay (samples) of right relative to left from time-domain signals"""
    spec_left, spec_right = _time_domain_spectra(left, right, max_lag, window_len, hop)
    delays = phat_tdoas(spec_left, spec_right, max_lag, 1)
    if not delays:
        raise ValueError("no signal")
    return delays[0]


def gcc_phat_tdoas(left: np.ndarray, right: np.ndarray, max_lag: float, num_sources: int = 1,
                   window_len: int = 1024, hop: int = 512) -> List[float]:
    """PHAT histogram peaks of a time-domain stereo recording"""
    spec_left, spec_right = _time_domain_spectra(left, right, max_lag, window_len, hop)
    return phat_tdoas(spec_left, spec_right, max_lag, num_sources)


@dataclass(frozen=True)
class TdoaRegressor:
    """Linear map from TDOA (samples) to azimuth (degrees)"""
    slope: float
    intercept: float
    stderr: float = 0.0
    max_lag: float = 16.0

    def predict(self, tdoa):
        return self.slope * np.asarray(tdoa, dtype=np.float64) + self.intercept

    def to_dict(self) -> Dict[str, Any]:
        return {'version': REGRESSOR_FORMAT_VERSION, 'slope': self.slope, 'intercept': self.intercept,
                'stderr': self.stderr, 'max_lag': self.max_lag}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TdoaRegressor':
        if data.get('version') != REGRESSOR_FORMAT_VERSION:
            raise ValueError(f"unsupported regressor format version {data.get('version')}")
        return cls(float(data['slope']), float(data['intercept']), float(data.get('stderr', 0.0)),
                   float(data.get('max_lag', 16.0)))


def fit_tdoa_regressor(tdoas: Sequence[float], azimuths: Sequence[float], max_lag: float = 16.0) -> TdoaRegressor:
    """Least-squares line from delay to azimuth over calibration recordings"""
    tdoas = np.asarray(tdoas, dtype=np.float64)
    azimuths = np.asarray(azimuths, dtype=np.float64)
    if tdoas.shape != azimuths.shape or tdoas.size < 2:
        raise ValueError("need at least 2 (tdoa, azimuth) samples")
    if np.ptp(tdoas) == 0:
        raise ValueError("degenerate regression: all tdoas are equal")
    fit = stats.linregress(tdoas, azimuths)
    return TdoaRegressor(float(fit.slope), float(fit.intercept), float(fit.stderr), max_lag)
