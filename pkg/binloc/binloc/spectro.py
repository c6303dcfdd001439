"""Binaural feature spectrograms: STFT, ILD/IPD features, activity masks and the .bnsp codec"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import scipy.fft
import scipy.signal

from .utils.cues import Cue, blocks_per_bin, cue_from_dims, split_blocks, stack_blocks
from .utils.logger import setup_logger
from .utils.numerics import kahan_sum

logger = setup_logger(__name__)

MAGNITUDE_FLOOR = 1e-12
BNSP_MAGIC = b'BNSP'
_BNSP_HEADER = struct.Struct('<4sIII')

Epsilon = Union[float, np.ndarray]


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F x T positive-frequency STFT coefficients (DC dropped, Nyquist kept)"""
    data: np.ndarray
    sample_rate: float
    window_len: int
    hop: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError(f"spectrogram must be F x T with T >= 1, got shape {self.data.shape}")

    @property
    def F(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> 'ComplexSpectrogram':
        return ComplexSpectrogram(data, self.sample_rate, self.window_len, self.hop)


@dataclass(frozen=True)
class BinauralSpectrogram:
    """D x T binaural features with the matching binary activity matrix"""
    features: np.ndarray
    activity: np.ndarray
    F: int
    cue: Cue = Cue.ILPD
    sample_rate: float = field(default=16000.0, compare=False)

    def __post_init__(self):
        if self.features.shape != self.activity.shape:
            raise ValueError(
                f"features {self.features.shape} and activity {self.activity.shape} differ in shape")
        if self.features.shape[0] != self.F * blocks_per_bin(self.cue):
            raise ValueError(f"D={self.features.shape[0]} does not match F={self.F} for cue {self.cue.value}")

    @property
    def D(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.features.shape[1]

    @property
    def active_fraction(self) -> float:
        return float(np.count_nonzero(self.activity)) / self.activity.size


def stft(signal: np.ndarray, window_len: int = 1024, hop: int = 128,
         sample_rate: float = 16000.0) -> ComplexSpectrogram:
    """Hann-windowed short-time Fourier transform keeping bins 1..window_len/2"""
    signal = np.asarray(signal, dtype=np.float64)
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if window_len < 2 or window_len % 2:
        raise ValueError("window_len must be an even number of samples")
    if signal.ndim != 1 or signal.size < window_len:
        raise ValueError("signal too short")

    window = scipy.signal.get_window('hann', window_len)
    frames = np.lib.stride_tricks.sliding_window_view(signal, window_len)[::hop]
    spectrum = scipy.fft.rfft(frames * window, axis=1)
    return ComplexSpectrogram(np.ascontiguousarray(spectrum[:, 1:].T), float(sample_rate), window_len, hop)


def _check_pair(left: ComplexSpectrogram, right: ComplexSpectrogram) -> None:
    if left.data.shape != right.data.shape:
        raise ValueError(f"left {left.data.shape} and right {right.data.shape} spectrograms differ in shape")
    if left.sample_rate != right.sample_rate:
        raise ValueError(f"left ({left.sample_rate} Hz) and right ({right.sample_rate} Hz) sample rates differ")


def binaural_features(left: ComplexSpectrogram, right: ComplexSpectrogram,
                      cue: Cue = Cue.ILPD) -> BinauralSpectrogram:
    """ILD (dB) and IPD (cos, sin) of the right/left ratio, activity all-ones"""
    _check_pair(left, right)
    mag_l = np.maximum(np.abs(left.data), MAGNITUDE_FLOOR)
    mag_r = np.maximum(np.abs(right.data), MAGNITUDE_FLOOR)
    ild = 20.0 * (np.log10(mag_r) - np.log10(mag_l))
    phase = np.angle(right.data * np.conj(left.data))
    blocks = {'ild': ild, 'ipd_real': np.cos(phase), 'ipd_imag': np.sin(phase)}
    features = stack_blocks(blocks, cue)
    return BinauralSpectrogram(features, np.ones(features.shape, dtype=bool), left.F, cue, left.sample_rate)


def channel_power(left: ComplexSpectrogram, right: ComplexSpectrogram) -> np.ndarray:
    """Summed left and right power per time-frequency bin"""
    _check_pair(left, right)
    return np.abs(left.data) ** 2 + np.abs(right.data) ** 2


def activity_mask(left: ComplexSpectrogram, right: ComplexSpectrogram, epsilon: Epsilon,
                  cue: Cue = Cue.ILPD) -> np.ndarray:
    """chi_ft = 1 iff |s^L|^2 + |s^R|^2 >= epsilon, replicated over the cue blocks"""
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilon must be >= 0")
    power = channel_power(left, right)
    if eps.ndim == 1:
        if eps.shape[0] != left.F:
            raise ValueError(f"per-frequency epsilon has {eps.shape[0]} entries, expected {left.F}")
        eps = eps[:, None]
    chi = power >= eps
    return np.tile(chi, (blocks_per_bin(cue), 1))


def noise_floor_epsilon(noise_left: ComplexSpectrogram, noise_right: ComplexSpectrogram,
                        factor: float = 1.0, per_frequency: bool = False) -> Epsilon:
    """Power threshold from a noise-only recording: factor x mean summed channel power"""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    if noise_left.data.size == 0 or noise_right.data.size == 0:
        raise ValueError("noise recording is empty")
    power = channel_power(noise_left, noise_right)
    if per_frequency:
        return factor * power.mean(axis=1)
    return float(factor * power.mean())


def extract(left: ComplexSpectrogram, right: ComplexSpectrogram, epsilon: Epsilon,
            cue: Cue = Cue.ILPD) -> BinauralSpectrogram:
    """Binaural features together with the activity matrix of a power threshold"""
    spec = binaural_features(left, right, cue)
    chi = activity_mask(left, right, epsilon, cue)
    logger.debug(f"Extracted {spec.D}x{spec.T} features, {chi.mean():.1%} active")
    return BinauralSpectrogram(spec.features, chi, spec.F, cue, spec.sample_rate)


def mean_feature_vector(spec: BinauralSpectrogram) -> np.ndarray:
    """Temporal mean of a full (all-active) binaural spectrogram"""
    if not np.all(spec.activity):
        raise ValueError("mean feature vector requires full spectrogram")
    return kahan_sum(spec.features, axis=1) / spec.T


def ipd_norms(spec: BinauralSpectrogram) -> np.ndarray:
    """|phi_ft| for every bin; 1 wherever the spectrogram carries IPD"""
    blocks = split_blocks(spec.features, spec.cue)
    return np.hypot(blocks['ipd_real'], blocks['ipd_imag'])


def write_bnsp(path: Path, spec: BinauralSpectrogram) -> None:
    """Header (magic, D, F, T), float64 features row-major, then one byte per activity entry"""
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(_BNSP_HEADER.pack(BNSP_MAGIC, spec.D, spec.F, spec.T))
        f.write(np.ascontiguousarray(spec.features, dtype='<f8').tobytes())
        f.write(np.ascontiguousarray(spec.activity, dtype=np.uint8).tobytes())


def read_bnsp(path: Path, sample_rate: float = 16000.0) -> BinauralSpectrogram:
    """Read a binaural spectrogram written by write_bnsp"""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _BNSP_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, D, F, T = _BNSP_HEADER.unpack_from(raw)
    if magic != BNSP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    n = D * T
    expected = _BNSP_HEADER.size + 8 * n + n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = _BNSP_HEADER.size
    features = np.frombuffer(raw, dtype='<f8', count=n, offset=offset).reshape(D, T).astype(np.float64)
    activity = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + 8 * n).reshape(D, T).astype(bool)
    return BinauralSpectrogram(features, activity, F, cue_from_dims(D, F), sample_rate)
