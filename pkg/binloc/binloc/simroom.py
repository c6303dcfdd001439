"""
Synthetic acoustic space: direction-dependent binaural filter banks, source
spectrograms and the additive mixing model s = sum_m h(f, x_m) s_m + g.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .spectro import ComplexSpectrogram
from .utils.logger import setup_logger

logger = setup_logger(__name__)

BANK_FORMAT_VERSION = 1
MAX_DELAY_S = 0.7e-3
EXTRAPOLATION_STEPS = 0.5

_LEVEL_NEPERS = 0.46
_LEVEL_RMS = 0.1
_PHASE_RMS = 0.1
_TILT_RMS = 0.05
_ELEVATION_NEPERS = 0.46
_ELEVATION_RADIANS = 0.5
_FREQ_ORDER = 2


class SourceKind(Enum):
    WHITE = "white"
    SPARSE = "sparse"


@dataclass(frozen=True)
class DirectionGrid:
    """Regular azimuth x elevation grid in degrees; nodes are ordered elevation-major"""
    az_min: float
    az_max: float
    n_az: int
    el_min: float
    el_max: float
    n_el: int

    def __post_init__(self):
        if self.n_az < 2 or self.n_el < 2:
            raise ValueError("direction grid needs at least 2 points per axis")
        if self.az_max <= self.az_min or self.el_max <= self.el_min:
            raise ValueError("direction grid bounds must be increasing")

    @classmethod
    def centered(cls, width: float, height: float, n_az: int, n_el: int) -> 'DirectionGrid':
        return cls(-width / 2, width / 2, n_az, -height / 2, height / 2, n_el)

    @property
    def az_step(self) -> float:
        return (self.az_max - self.az_min) / (self.n_az - 1)

    @property
    def el_step(self) -> float:
        return (self.el_max - self.el_min) / (self.n_el - 1)

    @property
    def size(self) -> int:
        return self.n_az * self.n_el

    def azimuths(self) -> np.ndarray:
        return np.linspace(self.az_min, self.az_max, self.n_az)

    def elevations(self) -> np.ndarray:
        return np.linspace(self.el_min, self.el_max, self.n_el)

    def directions(self) -> np.ndarray:
        """size x 2 array of (azimuth, elevation)"""
        el, az = np.meshgrid(self.elevations(), self.azimuths(), indexing='ij')
        return np.stack([az.ravel(), el.ravel()], axis=1)

    def fractional_index(self, direction: Sequence[float]) -> Tuple[float, float]:
        az, el = direction
        return (az - self.az_min) / self.az_step, (el - self.el_min) / self.el_step

    def contains(self, direction: Sequence[float], tolerance_steps: float = 0.0) -> bool:
        i, j = self.fractional_index(direction)
        return (-tolerance_steps <= i <= self.n_az - 1 + tolerance_steps
                and -tolerance_steps <= j <= self.n_el - 1 + tolerance_steps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'az_min': self.az_min, 'az_max': self.az_max, 'n_az': self.n_az,
            'el_min': self.el_min, 'el_max': self.el_max, 'n_el': self.n_el,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DirectionGrid':
        return cls(float(data['az_min']), float(data['az_max']), int(data['n_az']),
                   float(data['el_min']), float(data['el_max']), int(data['n_el']))


class _Expansion:
    """Random smooth function of (u, v, nu) on [-1, 1]^2 x (0, 1], a sum of products of cosines"""

    def __init__(self, rng: np.random.Generator, order: int, rms: float):
        p, q, r = np.meshgrid(np.arange(order + 1), np.arange(order + 1), np.arange(_FREQ_ORDER + 1),
                              indexing='ij')
        self.p, self.q, self.r = p.ravel(), q.ravel(), r.ravel()
        weights = rng.normal(size=self.p.size) / (1.0 + self.p + self.q) ** 2
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, self.p.size))
        self.weights = weights * rms * math.sqrt(8.0) / np.linalg.norm(weights)

    def __call__(self, u: np.ndarray, v: np.ndarray, nu: np.ndarray) -> np.ndarray:
        """Evaluate on directions (u, v) of shape (n,) and frequencies nu of shape (F,); returns n x F"""
        cu = np.cos(0.5 * np.pi * self.p * u[:, None] + self.phases[0])
        cv = np.cos(0.5 * np.pi * self.q * v[:, None] + self.phases[1])
        cf = np.cos(np.pi * self.r * nu[:, None] + self.phases[2])
        return (cu * cv * self.weights) @ cf.T


@dataclass
class FilterBank:
    """
    Complex gains h^L(f, x), h^R(f, x) tabulated on a direction grid.

    The right-ear log-gain is a smooth level shading plus random low-order
    trigonometric terms, with a phase lag pi f tau(az).  The left ear mirrors it
    in azimuth about the grid centre.  Both ears carry an opposite-signed level and
    phase shading in elevation plus an elevation-proportional tilt, so they agree
    dead-ahead while elevation stays observable on the median plane.
    Only (grid, F, seed, smoothness_order, sample_rate) are stored; the tables are
    regenerated from them.
    """
    grid: DirectionGrid
    F: int
    seed: int = 0
    smoothness_order: int = 3
    sample_rate: float = 16000.0
    left: np.ndarray = field(init=False, repr=False, compare=False)
    right: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.F < 4:
            raise ValueError("filter bank needs F >= 4")
        if self.smoothness_order < 0:
            raise ValueError("smoothness_order must be >= 0")
        rng = np.random.default_rng(self.seed)
        self._level = _Expansion(rng, self.smoothness_order, _LEVEL_RMS)
        self._phase = _Expansion(rng, self.smoothness_order, _PHASE_RMS)
        self._tilt_level = _Expansion(rng, self.smoothness_order, _TILT_RMS)
        self._tilt_phase = _Expansion(rng, self.smoothness_order, _TILT_RMS)
        left, right = self.analytic_gains(self.grid.directions())
        shape = (self.grid.n_el, self.grid.n_az, self.F)
        self.left, self.right = left.reshape(shape), right.reshape(shape)
        logger.debug(f"Synthesised {self.grid.n_el}x{self.grid.n_az} filter bank, F={self.F}, seed={self.seed}")

    @property
    def frequencies(self) -> np.ndarray:
        """Centre frequency (Hz) of bins 1..F of a 2F-point transform"""
        return np.arange(1, self.F + 1) * self.sample_rate / (2 * self.F)

    def _normalized(self, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g = self.grid
        u = (directions[:, 0] - 0.5 * (g.az_min + g.az_max)) / (0.5 * (g.az_max - g.az_min))
        v = (directions[:, 1] - 0.5 * (g.el_min + g.el_max)) / (0.5 * (g.el_max - g.el_min))
        return u, v

    def analytic_gains(self, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gains of the underlying smooth model at arbitrary directions, n x F per ear"""
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        u, v = self._normalized(directions)
        nu = np.arange(1, self.F + 1) / self.F
        shading = 0.5 * _LEVEL_NEPERS * (0.3 + 0.7 * nu)[None, :]
        delay = np.pi * self.frequencies[None, :] * MAX_DELAY_S * np.sin(np.radians(directions[:, 0]))[:, None]
        # elevation cue: level weight changes sign across the band, phase weight does not
        rise = np.sin(0.5 * np.pi * v)[:, None]
        el_level = 0.5 * _ELEVATION_NEPERS * np.cos(0.75 * np.pi * nu)[None, :] * rise
        el_phase = 0.5 * _ELEVATION_RADIANS * np.sin(np.pi * nu)[None, :] * rise

        log_right = (shading * np.sin(0.5 * np.pi * u)[:, None] + self._level(u, v, nu) + el_level
                     + 1j * (self._phase(u, v, nu) - delay - el_phase))
        log_left = (shading * np.sin(-0.5 * np.pi * u)[:, None] + self._level(-u, v, nu) - el_level
                    + v[:, None] * self._tilt_level(u, v, nu)
                    + 1j * (self._phase(-u, v, nu) + v[:, None] * self._tilt_phase(u, v, nu) + delay + el_phase))
        return np.exp(log_left), np.exp(log_right)

    def gains_at(self, direction: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Bilinear interpolation of log-magnitude and corner-relative phase.
        Grid nodes return the tabulated gains; up to half a step outside the grid
        the nearest cell is extrapolated.
        """
        if not self.grid.contains(direction, EXTRAPOLATION_STEPS):
            raise ValueError(f"direction {tuple(direction)} outside filter bank grid")
        i, j = self.grid.fractional_index(direction)
        i0 = int(min(max(math.floor(i), 0), self.grid.n_az - 2))
        j0 = int(min(max(math.floor(j), 0), self.grid.n_el - 2))
        di, dj = i - i0, j - j0
        if di in (0.0, 1.0) and dj in (0.0, 1.0):
            return self.left[j0 + int(dj), i0 + int(di)], self.right[j0 + int(dj), i0 + int(di)]
        return (self._interpolate(self.left, i0, j0, di, dj),
                self._interpolate(self.right, i0, j0, di, dj))

    @staticmethod
    def _interpolate(table: np.ndarray, i0: int, j0: int, di: float, dj: float) -> np.ndarray:
        base = table[j0, i0]
        corners = [(0, 0), (0, 1), (1, 0), (1, 1)]
        weights = [(1 - dj) * (1 - di), (1 - dj) * di, dj * (1 - di), dj * di]
        log_mag = np.zeros(table.shape[-1])
        phase = np.zeros(table.shape[-1])
        for (ej, ei), w in zip(corners, weights):
            corner = table[j0 + ej, i0 + ei]
            log_mag += w * np.log(np.abs(corner))
            phase += w * np.angle(corner / base)
        return np.exp(log_mag + 1j * (np.angle(base) + phase))

    def max_relative_step(self) -> float:
        """Largest |h(next) / h - 1| between neighbouring grid nodes, over both ears and axes"""
        worst = 0.0
        for table in (self.left, self.right):
            for axis in (0, 1):
                ratio = np.diff(np.log(table), axis=axis)
                worst = max(worst, float(np.max(np.abs(np.expm1(ratio)))))
        return worst

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': BANK_FORMAT_VERSION,
            'grid': self.grid.to_dict(),
            'F': self.F,
            'seed': self.seed,
            'smoothness_order': self.smoothness_order,
            'sample_rate': self.sample_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FilterBank':
        if data.get('version') != BANK_FORMAT_VERSION:
            raise ValueError(f"unsupported filter bank format version {data.get('version')}")
        return cls(DirectionGrid.from_dict(data['grid']), int(data['F']), int(data['seed']),
                   int(data['smoothness_order']), float(data['sample_rate']))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> 'FilterBank':
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump_dense(self, path: Path) -> None:
        with open(path, 'wb') as f:
            np.savez(f, directions=self.grid.directions(), frequencies=self.frequencies,
                     left=self.left.reshape(self.grid.size, self.F),
                     right=self.right.reshape(self.grid.size, self.F))


def make_filter_bank(grid: DirectionGrid, F: int, smoothness_order: int = 3, seed: int = 0,
                     sample_rate: float = 16000.0) -> FilterBank:
    """Synthesise the filter bank for grid; deterministic in seed"""
    return FilterBank(grid, F, seed, smoothness_order, sample_rate)


@dataclass(frozen=True)
class SourceSignal:
    spectrogram: np.ndarray
    kind: SourceKind

    @property
    def F(self) -> int:
        return self.spectrogram.shape[0]

    @property
    def T(self) -> int:
        return self.spectrogram.shape[1]

    @property
    def occupancy(self) -> float:
        return float(np.count_nonzero(self.spectrogram)) / self.spectrogram.size

    def scaled(self, gain: float) -> 'SourceSignal':
        return SourceSignal(gain * self.spectrogram, self.kind)


def _complex_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / math.sqrt(2.0)


def white_noise_source(F: int, T: int, seed: int = 0) -> SourceSignal:
    """Unit-variance complex Gaussian spectrogram with every bin occupied"""
    rng = np.random.default_rng(seed)
    return SourceSignal(_complex_normal(rng, (F, T)), SourceKind.WHITE)


def _band_support(rng: np.random.Generator, F: int, n_active: int) -> np.ndarray:
    """Boolean F-vector with n_active bins split into 1-3 contiguous bands"""
    n_bands = int(min(rng.integers(1, 4), n_active))
    sizes = np.diff(np.concatenate([[0], np.sort(rng.choice(np.arange(1, n_active), n_bands - 1, replace=False)),
                                    [n_active]])) if n_bands > 1 else np.array([n_active])
    free = F - n_active
    gaps = np.diff(np.concatenate([[0], np.sort(rng.integers(0, free + 1, size=n_bands)), [free]]))
    support = np.zeros(F, dtype=bool)
    position = 0
    for gap, size in zip(gaps[:-1], sizes):
        position += gap
        support[position:position + size] = True
        position += size
    return support


def sparse_source(F: int, T: int, occupancy: float, seed: int = 0) -> SourceSignal:
    """
    Speech-like sparse spectrogram: each frame keeps about occupancy x F bins
    in a few contiguous frequency bands, with a random per-frame level.
    """
    if not 0.0 < occupancy <= 1.0:
        raise ValueError("occupancy must be in (0, 1]")
    rng = np.random.default_rng(seed)
    values = _complex_normal(rng, (F, T)) * np.exp(rng.normal(0.0, 0.5, size=T))[None, :]
    if occupancy == 1.0:
        return SourceSignal(values, SourceKind.SPARSE)
    jitter = 1.0 + 0.2 * rng.uniform(-1.0, 1.0, size=T)
    counts = np.clip(np.round(occupancy * F * jitter), 1, F).astype(int)
    support = np.stack([_band_support(rng, F, int(n)) for n in counts], axis=1)
    return SourceSignal(np.where(support, values, 0.0), SourceKind.SPARSE)


def render_mixture(bank: FilterBank, directions: Sequence[Sequence[float]], sources: Sequence[SourceSignal],
                   noise_std: float = 0.0, seed: int = 0,
                   hop: int = 128) -> Tuple[ComplexSpectrogram, ComplexSpectrogram]:
    """Left and right spectrograms of M sources at the given directions plus complex Gaussian sensor noise"""
    if len(directions) != len(sources) or not sources:
        raise ValueError("need one direction per source and at least one source")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    shape = sources[0].spectrogram.shape
    for source in sources:
        if source.spectrogram.shape != shape:
            raise ValueError("all sources must share one F x T shape")
    if shape[0] != bank.F:
        raise ValueError(f"sources have F={shape[0]} but the filter bank has F={bank.F}")

    left = np.zeros(shape, dtype=np.complex128)
    right = np.zeros(shape, dtype=np.complex128)
    for direction, source in zip(directions, sources):
        h_left, h_right = bank.gains_at(direction)
        left = left + h_left[:, None] * source.spectrogram
        right = right + h_right[:, None] * source.spectrogram
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        left = left + noise_std * _complex_normal(rng, shape)
        right = right + noise_std * _complex_normal(rng, shape)

    window_len = 2 * bank.F
    return (ComplexSpectrogram(left, bank.sample_rate, window_len, hop),
            ComplexSpectrogram(right, bank.sample_rate, window_len, hop))


def noise_only(bank: FilterBank, T: int, noise_std: float, seed: int = 0,
               hop: int = 128) -> Tuple[ComplexSpectrogram, ComplexSpectrogram]:
    """Sensor noise recording with no source, used to calibrate the activity threshold"""
    silent = SourceSignal(np.zeros((bank.F, T), dtype=np.complex128), SourceKind.WHITE)
    center = [0.5 * (bank.grid.az_min + bank.grid.az_max), 0.5 * (bank.grid.el_min + bank.grid.el_max)]
    return render_mixture(bank, [center], [silent], noise_std, seed, hop)
