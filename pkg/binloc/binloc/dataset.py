"""Training and test set assembly for one and two simultaneous sources"""

import json
import shutil
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .gllim import TrainingSet
from .simroom import (DirectionGrid, FilterBank, SourceKind, SourceSignal, noise_only, render_mixture,
                      sparse_source, white_noise_source)
from .spectro import (BinauralSpectrogram, ComplexSpectrogram, Epsilon, binaural_features, extract,
                      mean_feature_vector, noise_floor_epsilon, read_bnsp, write_bnsp)
from .utils.cues import Cue
from .utils.logger import log_progress, setup_logger
from .utils.parallel import ordered_map

logger = setup_logger(__name__)

MANIFEST_FORMAT_VERSION = 1
EPSILON_FLOOR = 1e-12
DEFAULT_CACHE_LIMIT = 512


def child_seeds(seed: int, n: int) -> List[int]:
    """n independent integer seeds derived from one root seed"""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def frames_for_duration(duration: float, sample_rate: float = 16000.0, hop: int = 128) -> int:
    """Number of STFT frames covering duration seconds, at least 1"""
    return max(1, int(round(duration * sample_rate / hop)))


@dataclass(frozen=True)
class Recording:
    """Stereo spectrogram of one white-noise source at a known direction"""
    direction: np.ndarray
    left: ComplexSpectrogram
    right: ComplexSpectrogram


@dataclass
class RecordingSet:
    """
    Single-source recordings on a direction grid.  Recordings are rendered on
    first access from per-direction seeds and kept in a bounded LRU cache, so
    pair mixing reuses them without holding an unbounded set in memory.
    """
    bank: FilterBank
    directions: np.ndarray
    T: int
    noise_std: float = 0.0
    seed: int = 0
    hop: int = 128
    cache_limit: int = DEFAULT_CACHE_LIMIT
    seeds: List[int] = field(init=False, repr=False)
    _cache: 'OrderedDict[int, Recording]' = field(init=False, repr=False, compare=False,
                                                  default_factory=OrderedDict)
    _lock: threading.Lock = field(init=False, repr=False, compare=False, default_factory=threading.Lock)

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        for direction in self.directions:
            if not self.bank.grid.contains(direction):
                raise ValueError(f"training direction {direction.tolist()} outside filter bank grid")
        if self.cache_limit < 0:
            raise ValueError("cache_limit must be >= 0")
        self.seeds = child_seeds(self.seed, len(self.directions))

    def __len__(self) -> int:
        return len(self.directions)

    def render(self, index: int) -> Recording:
        """Render recording index from its seed, bypassing the cache"""
        source_seed, noise_seed = child_seeds(self.seeds[index], 2)
        source = white_noise_source(self.bank.F, self.T, source_seed)
        left, right = render_mixture(self.bank, [self.directions[index]], [source], self.noise_std,
                                     noise_seed, self.hop)
        return Recording(self.directions[index], left, right)

    def __getitem__(self, index: int) -> Recording:
        with self._lock:
            if index in self._cache:
                self._cache.move_to_end(index)
                return self._cache[index]
        recording = self.render(index)
        if self.cache_limit:
            with self._lock:
                self._cache[index] = recording
                while len(self._cache) > self.cache_limit:
                    self._cache.popitem(last=False)
        return recording

    @property
    def cached(self) -> int:
        return len(self._cache)


def record_grid(bank: FilterBank, grid: Optional[DirectionGrid] = None, T: int = 125, noise_std: float = 0.0,
                seed: int = 0, hop: int = 128) -> RecordingSet:
    """Recordings at every node of grid, or of the bank grid when grid is None"""
    grid = grid or bank.grid
    return RecordingSet(bank, grid.directions(), T, noise_std, seed, hop)


def recording_features(recording: Recording, cue: Cue = Cue.ILPD) -> np.ndarray:
    """Mean feature vector of one recording"""
    return mean_feature_vector(binaural_features(recording.left, recording.right, cue))


def build_single_source_training(bank: FilterBank, grid: Optional[DirectionGrid] = None, T: int = 125,
                                 noise_std: float = 0.0, seed: int = 0, cue: Cue = Cue.ILPD,
                                 threads: int = 1, hop: int = 128,
                                 recordings: Optional[RecordingSet] = None) -> TrainingSet:
    """One white-noise recording per grid direction, reduced to its mean feature vector"""
    if recordings is None:
        recordings = record_grid(bank, grid, T, noise_std, seed, hop)
    logger.info(f"Rendering {len(recordings)} single-source training recordings (T={recordings.T})")

    def features(index: int) -> np.ndarray:
        y = recording_features(recordings[index], cue)
        log_progress(logger, index + 1, len(recordings), "training directions")
        return y

    Y = np.stack(ordered_map(features, range(len(recordings)), threads))
    metadata = {
        'kind': 'single',
        'bank': bank.to_dict(),
        'T': recordings.T,
        'noise_std': recordings.noise_std,
        'seed': recordings.seed,
        'cue': cue.value,
    }
    return TrainingSet(recordings.directions.copy(), Y, metadata)


def canonical_order(first: Sequence[float], second: Sequence[float]) -> np.ndarray:
    """Stack two (azimuth, elevation) directions sorted by azimuth, then elevation"""
    a, b = tuple(float(v) for v in first), tuple(float(v) for v in second)
    if a == b:
        raise ValueError("two sources cannot share one direction")
    return np.array(a + b if a < b else b + a)


def is_canonical(x: np.ndarray) -> bool:
    """True when the first source sorts before the second"""
    return tuple(x[:2]) < tuple(x[2:4])


def mix_recordings(first: Recording, second: Recording, gain: float = 1.0,
                   cue: Cue = Cue.ILPD) -> np.ndarray:
    """Mean feature vector of first + gain x second, summed channel by channel"""
    if np.array_equal(first.direction, second.direction):
        raise ValueError("cannot pair a direction with itself")
    if not (np.any(second.left.data) or np.any(second.right.data)):
        raise ValueError("cannot mix with an all-zero recording")
    left = first.left.with_data(first.left.data + gain * second.left.data)
    right = first.right.with_data(first.right.data + gain * second.right.data)
    return mean_feature_vector(binaural_features(left, right, cue))


def eligible_pairs(directions: np.ndarray, min_sep: float = 1.5, max_sep: float = 20.0) -> np.ndarray:
    """Index pairs (i < j) at least min_sep apart and at most max_sep apart on each axis"""
    i, j = np.triu_indices(len(directions), k=1)
    delta = np.abs(directions[i] - directions[j])
    keep = (np.hypot(delta[:, 0], delta[:, 1]) >= min_sep) & (delta.max(axis=1) <= max_sep)
    return np.stack([i[keep], j[keep]], axis=1)


def build_pair_training(recordings: RecordingSet, num_pairs: int, seed: int = 0, min_sep: float = 1.5,
                        max_sep: float = 20.0, gain_db: float = 0.5, cue: Cue = Cue.ILPD,
                        threads: int = 1) -> TrainingSet:
    """
    Two-source training pairs by mixing single-source recordings.  Pairs are
    drawn without replacement among eligible unordered pairs; recordings are
    reused across pairs.  Labels use the canonical source order.
    """
    if len(recordings) < 2:
        raise ValueError("need at least 2 distinct directions")
    candidates = eligible_pairs(recordings.directions, min_sep, max_sep)
    if num_pairs > len(candidates):
        raise ValueError(f"num_pairs={num_pairs} exceeds the {len(candidates)} eligible direction pairs")

    rng = np.random.default_rng(seed)
    chosen = candidates[rng.choice(len(candidates), size=num_pairs, replace=False)]
    gains = 10.0 ** (rng.uniform(-gain_db, gain_db, size=num_pairs) / 20.0)
    logger.info(f"Mixing {num_pairs} source pairs from {len(recordings)} recordings")

    def pair(index: int) -> np.ndarray:
        i, j = chosen[index]
        y = mix_recordings(recordings[i], recordings[j], gains[index], cue)
        log_progress(logger, index + 1, num_pairs, "training pairs")
        return y

    Y = np.stack(ordered_map(pair, range(num_pairs), threads))
    X = np.stack([canonical_order(recordings.directions[i], recordings.directions[j]) for i, j in chosen])
    metadata = {
        'kind': 'pairs',
        'bank': recordings.bank.to_dict(),
        'T': recordings.T,
        'noise_std': recordings.noise_std,
        'seed': seed,
        'recordings_seed': recordings.seed,
        'min_sep': min_sep,
        'max_sep': max_sep,
        'gain_db': gain_db,
        'cue': cue.value,
    }
    return TrainingSet(X, Y, metadata)


def offgrid_directions(grid: DirectionGrid, n_az: int, n_el: int) -> np.ndarray:
    """n_az x n_el cell centres of the training grid, spread evenly over it"""
    if not (1 <= n_az <= grid.n_az - 1 and 1 <= n_el <= grid.n_el - 1):
        raise ValueError(f"cannot place {n_az}x{n_el} test positions inside a {grid.n_az}x{grid.n_el} grid")
    az_cells = np.round(np.linspace(0, grid.n_az - 2, n_az)).astype(int)
    el_cells = np.round(np.linspace(0, grid.n_el - 2, n_el)).astype(int)
    az = grid.az_min + (az_cells + 0.5) * grid.az_step
    el = grid.el_min + (el_cells + 0.5) * grid.el_step
    el_mesh, az_mesh = np.meshgrid(el, az, indexing='ij')
    directions = np.stack([az_mesh.ravel(), el_mesh.ravel()], axis=1)
    assert min_node_distance(grid, directions) > 0
    return directions


def min_node_distance(grid: DirectionGrid, directions: np.ndarray) -> float:
    """Smallest distance (degrees) from any direction to a grid node"""
    nodes = grid.directions()
    directions = np.atleast_2d(directions).reshape(-1, 2)
    return float(np.min(np.linalg.norm(directions[:, None, :] - nodes[None, :, :], axis=2)))


def sample_pair_directions(grid: DirectionGrid, n: int, seed: int = 0, min_sep: float = 1.5,
                           max_sep: float = 20.0) -> np.ndarray:
    """n canonical two-source directions drawn inside the grid, separation in [min_sep, max_sep]"""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        first = rng.uniform([grid.az_min, grid.el_min], [grid.az_max, grid.el_max])
        second = first + rng.uniform(-max_sep, max_sep, size=2)
        if not grid.contains(second) or np.hypot(*(second - first)) < min_sep:
            continue
        out.append(canonical_order(first, second))
    directions = np.stack(out)
    assert min_node_distance(grid, directions) > 0
    return directions


@dataclass
class ManifestEntry:
    id: str
    directions: List[float]
    kinds: List[str]
    role: str = 'test'
    spectrogram: Optional[str] = None
    stereo: Optional[str] = None

    @property
    def num_sources(self) -> int:
        return len(self.directions) // 2


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    num_sources: int
    cue: str = Cue.ILPD.value
    bank: Dict[str, Any] = field(default_factory=dict)
    epsilon: Any = None
    T: int = 125
    metadata: Dict[str, Any] = field(default_factory=dict)

    def validate(self, grid: Optional[DirectionGrid] = None) -> None:
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest ids must be unique")
        for entry in self.entries:
            if len(entry.directions) != 2 * self.num_sources:
                raise ValueError(f"entry {entry.id} has {len(entry.directions)} direction values, "
                                 f"expected {2 * self.num_sources}")
            if grid is None:
                continue
            for m in range(entry.num_sources):
                direction = entry.directions[2 * m:2 * m + 2]
                if not grid.contains(direction, 0.5):
                    raise ValueError(f"entry {entry.id} direction {direction} outside the grid bounds")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': MANIFEST_FORMAT_VERSION,
            'num_sources': self.num_sources,
            'cue': self.cue,
            'T': self.T,
            'epsilon': self.epsilon,
            'bank': self.bank,
            'metadata': self.metadata,
            'entries': [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Manifest':
        if data.get('version') != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format version {data.get('version')}")
        entries = [ManifestEntry(**e) for e in data['entries']]
        return cls(entries, int(data['num_sources']), data['cue'], data.get('bank', {}), data.get('epsilon'),
                   int(data.get('T', 125)), data.get('metadata', {}))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> 'Manifest':
        manifest = cls.from_dict(json.loads(Path(path).read_text()))
        manifest.validate()
        return manifest


@dataclass(frozen=True)
class LabelledItem:
    entry: ManifestEntry
    spec: BinauralSpectrogram
    left: Optional[ComplexSpectrogram] = None
    right: Optional[ComplexSpectrogram] = None

    @property
    def truth(self) -> np.ndarray:
        return np.array(self.entry.directions)


@dataclass
class LabelledSet:
    manifest: Manifest
    items: List[LabelledItem]

    def __len__(self) -> int:
        return len(self.items)


def calibrate_epsilon(bank: FilterBank, T: int, noise_std: float, factor: float = 1.0, seed: int = 0,
                      per_frequency: bool = False, hop: int = 128) -> Epsilon:
    """Activity threshold from a noise-only rendering, floored so silent bins are always masked"""
    noise_left, noise_right = noise_only(bank, T, noise_std, seed, hop)
    epsilon = noise_floor_epsilon(noise_left, noise_right, factor, per_frequency)
    return np.maximum(epsilon, EPSILON_FLOOR) if per_frequency else max(epsilon, EPSILON_FLOOR)


def _make_source(kind: SourceKind, F: int, T: int, occupancy: float, seed: int) -> SourceSignal:
    if kind is SourceKind.WHITE:
        return white_noise_source(F, T, seed)
    return sparse_source(F, T, occupancy, seed)


def build_test_set(bank: FilterBank, directions: np.ndarray, kinds: Sequence[SourceKind], T: int = 125,
                   occupancy: float = 0.3, noise_std: float = 0.0, seed: int = 0, epsilon_factor: float = 1.0,
                   per_frequency: bool = False, identical: bool = False, gain_db: float = 0.5,
                   cue: Cue = Cue.ILPD, threads: int = 1, hop: int = 128) -> LabelledSet:
    """
    Render one labelled item per row of directions (M stacked (az, el) pairs),
    with the listed source kind per source.  identical=True emits the same sparse
    spectrogram from every direction of an item.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    M = directions.shape[1] // 2
    if directions.shape[1] != 2 * M or M < 1:
        raise ValueError("test directions must hold (azimuth, elevation) per source")
    if len(kinds) != M:
        raise ValueError(f"need {M} source kinds, got {len(kinds)}")
    for row in directions:
        for m in range(M):
            if not bank.grid.contains(row[2 * m:2 * m + 2], 0.5):
                raise ValueError(f"test direction {row[2 * m:2 * m + 2].tolist()} outside filter bank grid")

    epsilon = calibrate_epsilon(bank, T, noise_std, epsilon_factor, seed, per_frequency, hop)
    seeds = child_seeds(seed + 1, len(directions))
    logger.info(f"Rendering {len(directions)} test items with M={M} ({'+'.join(k.value for k in kinds)})")

    def render(index: int) -> LabelledItem:
        item_seeds = child_seeds(seeds[index], M + 2)
        rng = np.random.default_rng(item_seeds[-1])
        sources = []
        for m, kind in enumerate(kinds):
            source_seed = item_seeds[0] if identical else item_seeds[m]
            source = _make_source(SourceKind.SPARSE if identical else kind, bank.F, T, occupancy, source_seed)
            if m > 0:
                source = source.scaled(10.0 ** (rng.uniform(-gain_db, gain_db) / 20.0))
            sources.append(source)
        row = directions[index]
        left, right = render_mixture(bank, row.reshape(M, 2), sources, noise_std, item_seeds[M], hop)
        spec = extract(left, right, epsilon, cue)
        entry = ManifestEntry(
            id=f"{index:03d}",
            directions=row.tolist(),
            kinds=[SourceKind.SPARSE.value if identical else k.value for k in kinds],
            spectrogram=f"spec/{index:03d}.bnsp",
            stereo=f"stereo/{index:03d}.npz",
        )
        log_progress(logger, index + 1, len(directions), "test items")
        return LabelledItem(entry, spec, left, right)

    items = ordered_map(render, range(len(directions)), threads)
    epsilon_value = epsilon.tolist() if isinstance(epsilon, np.ndarray) else epsilon
    manifest = Manifest(
        entries=[item.entry for item in items],
        num_sources=M,
        cue=cue.value,
        bank=bank.to_dict(),
        epsilon=epsilon_value,
        T=T,
        metadata={'seed': seed, 'occupancy': occupancy, 'noise_std': noise_std, 'identical': identical,
                  'epsilon_factor': epsilon_factor, 'gain_db': gain_db},
    )
    manifest.validate(bank.grid)
    return LabelledSet(manifest, items)


def write_test_set(test_set: LabelledSet, out_dir: Path) -> Path:
    """manifest.json plus spec/NNN.bnsp and stereo/NNN.npz per item"""
    out_dir = Path(out_dir)
    (out_dir / 'spec').mkdir(parents=True, exist_ok=True)
    (out_dir / 'stereo').mkdir(parents=True, exist_ok=True)
    for item in test_set.items:
        write_bnsp(out_dir / item.entry.spectrogram, item.spec)
        if item.left is not None and item.entry.stereo:
            with open(out_dir / item.entry.stereo, 'wb') as f:
                np.savez(f, left=item.left.data, right=item.right.data,
                         sample_rate=item.left.sample_rate, window_len=item.left.window_len, hop=item.left.hop)
    manifest_path = out_dir / 'manifest.json'
    test_set.manifest.save(manifest_path)
    logger.info(f"Wrote {len(test_set)} test items to {out_dir}")
    return manifest_path


def _read_stereo_npz(path: Path) -> Tuple[ComplexSpectrogram, ComplexSpectrogram]:
    with np.load(path, allow_pickle=False) as data:
        sr, window_len, hop = float(data['sample_rate']), int(data['window_len']), int(data['hop'])
        return (ComplexSpectrogram(data['left'], sr, window_len, hop),
                ComplexSpectrogram(data['right'], sr, window_len, hop))


def load_test_set(manifest_path: Path, with_stereo: bool = True) -> LabelledSet:
    """Read a manifest and the spectrograms (and stereo data) it lists"""
    manifest_path = Path(manifest_path)
    manifest = Manifest.load(manifest_path)
    root = manifest_path.parent
    items = []
    for entry in manifest.entries:
        if entry.spectrogram is None:
            raise ValueError(f"entry {entry.id} has no spectrogram")
        spec = read_bnsp(root / entry.spectrogram)
        left = right = None
        if with_stereo and entry.stereo and (root / entry.stereo).exists():
            left, right = _read_stereo_npz(root / entry.stereo)
        items.append(LabelledItem(entry, spec, left, right))
    return LabelledSet(manifest, items)


def pack(manifest_path: Path, out_dir: Path) -> Path:
    """Bundle a manifest and its spectrograms as {manifest.json, spec/NNN.bnsp}, renumbering entries"""
    manifest_path = Path(manifest_path)
    manifest = Manifest.load(manifest_path)
    out_dir = Path(out_dir)
    (out_dir / 'spec').mkdir(parents=True, exist_ok=True)
    entries = []
    for index, entry in enumerate(manifest.entries):
        if entry.spectrogram is None:
            raise ValueError(f"entry {entry.id} has no spectrogram to pack")
        target = f"spec/{index:03d}.bnsp"
        shutil.copyfile(manifest_path.parent / entry.spectrogram, out_dir / target)
        entries.append(ManifestEntry(entry.id, entry.directions, entry.kinds, entry.role, target, None))
    packed = Manifest(entries, manifest.num_sources, manifest.cue, manifest.bank, manifest.epsilon,
                      manifest.T, manifest.metadata)
    packed.save(out_dir / 'manifest.json')
    logger.info(f"Packed {len(entries)} entries into {out_dir}")
    return out_dir / 'manifest.json'
