"""Run configuration: defaults, validation and environment overrides"""

import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Mapping, Optional

from .gllim import PriorMode
from .simroom import MAX_DELAY_S, DirectionGrid, SourceKind
from .utils.cues import Cue, parse_cue
from .utils.parallel import default_threads

SEED_ENV = 'BINLOC_SEED'

MIXTURES = {
    'white+white': (SourceKind.WHITE, SourceKind.WHITE),
    'white+sparse': (SourceKind.WHITE, SourceKind.SPARSE),
    'sparse+sparse': (SourceKind.SPARSE, SourceKind.SPARSE),
    'identical': (SourceKind.SPARSE, SourceKind.SPARSE),
}


class UsageError(Exception):
    """Invalid command line: unknown flag, bad value or inconsistent combination"""


@dataclass
class RunConfig:
    command: str = ''
    seed: int = 0
    threads: int = field(default_factory=default_threads)
    verbose: bool = False

    # acoustic space
    sample_rate: int = 16000
    window_len: int = 1024
    hop: int = 128
    fov_az: float = 28.0
    fov_el: float = 21.0
    grid_az: int = 24
    grid_el: int = 18
    smoothness_order: int = 3
    bank_seed: int = 0
    dump_dense: bool = False

    # datasets
    num_sources: int = 1
    train_frames: int = 125
    num_pairs: int = 20000
    test_az: int = 12
    test_el: int = 9
    num_test: int = 200
    mixture: str = 'sparse+sparse'
    occupancy: float = 0.3
    duration: float = 1.0
    noise_std: float = 0.0
    epsilon_factor: float = 1.0
    per_frequency: bool = False
    cue: str = Cue.ILPD.value
    min_sep: float = 1.5
    max_sep: float = 20.0
    gain_db: float = 0.5

    # model
    K: Optional[int] = None
    fast: bool = False
    prior_mode: str = PriorMode.FREE.value
    max_iter: int = 200
    rel_tol: float = 1e-6

    # evaluation
    threshold: Optional[float] = None
    use_activity: bool = True
    baseline: bool = True
    max_lag: Optional[float] = None

    @property
    def F(self) -> int:
        return self.window_len // 2

    @property
    def resolved_K(self) -> int:
        if self.K is not None:
            return self.K
        if self.num_sources == 1:
            return 32
        return 20 if self.fast else 100

    @property
    def resolved_threshold(self) -> float:
        if self.threshold is not None:
            return self.threshold
        return 5.0 if self.num_sources == 1 else 15.0

    @property
    def resolved_max_lag(self) -> float:
        if self.max_lag is not None:
            return self.max_lag
        return float(math.ceil(MAX_DELAY_S * self.sample_rate) + 2)

    @property
    def cue_set(self) -> Cue:
        return parse_cue(self.cue)

    @property
    def prior(self) -> PriorMode:
        return PriorMode(self.prior_mode)

    @property
    def mixture_kinds(self) -> List[SourceKind]:
        if self.num_sources == 1:
            return [SourceKind.SPARSE]
        return list(MIXTURES[self.mixture])

    @property
    def identical(self) -> bool:
        return self.num_sources == 2 and self.mixture == 'identical'

    @property
    def grid(self) -> DirectionGrid:
        return DirectionGrid.centered(self.fov_az, self.fov_el, self.grid_az, self.grid_el)

    def validate(self) -> 'RunConfig':
        """Reject invalid values before any work; messages name the offending flag"""
        checks = [
            (self.seed >= 0, "--seed must be >= 0"),
            (self.threads >= 1, "--threads must be >= 1"),
            (self.sample_rate > 0, "--sample-rate must be > 0"),
            (self.window_len >= 8 and self.window_len % 2 == 0, "--window-len must be an even number >= 8"),
            (self.hop >= 1, "--hop must be >= 1"),
            (self.fov_az > 0 and self.fov_el > 0, "--fov-az and --fov-el must be > 0"),
            (self.grid_az >= 2 and self.grid_el >= 2, "--grid-az and --grid-el must be >= 2"),
            (self.smoothness_order >= 0, "--smoothness-order must be >= 0"),
            (self.num_sources in (1, 2), "--num-sources must be 1 or 2"),
            (self.train_frames >= 1, "--train-frames must be >= 1"),
            (self.num_pairs >= 1, "--num-pairs must be >= 1"),
            (1 <= self.test_az < self.grid_az, "--test-az must be in [1, --grid-az)"),
            (1 <= self.test_el < self.grid_el, "--test-el must be in [1, --grid-el)"),
            (self.num_test >= 1, "--num-test must be >= 1"),
            (self.mixture in MIXTURES, f"--mixture must be one of {sorted(MIXTURES)}"),
            (0.0 < self.occupancy <= 1.0, "--occupancy must be in (0, 1]"),
            (self.duration > 0, "--duration must be > 0"),
            (self.noise_std >= 0, "--noise-std must be >= 0"),
            (self.epsilon_factor > 0, "--epsilon-factor must be > 0"),
            (self.cue in {c.value for c in Cue}, f"--cue must be one of {[c.value for c in Cue]}"),
            (0 <= self.min_sep <= self.max_sep, "--min-sep must be in [0, --max-sep]"),
            (self.gain_db >= 0, "--gain-db must be >= 0"),
            (self.K is None or self.K >= 1, "--K must be >= 1"),
            (self.prior_mode in {p.value for p in PriorMode}, "--prior-mode must be 'free' or 'fixed'"),
            (self.max_iter >= 1, "--max-iter must be >= 1"),
            (self.rel_tol > 0, "--rel-tol must be > 0"),
            (self.threshold is None or self.threshold > 0, "--threshold must be > 0"),
            (self.max_lag is None or 0 < self.max_lag < self.window_len / 2,
             "--max-lag must be in (0, --window-len / 2)"),
        ]
        for ok, message in checks:
            if not ok:
                raise UsageError(message)
        return self

    def with_env(self, environ: Mapping[str, str] = os.environ) -> 'RunConfig':
        """BINLOC_SEED, when set, overrides --seed"""
        value = environ.get(SEED_ENV)
        if value is None or value == '':
            return self
        try:
            seed = int(value)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be a non-negative integer, got '{value}'") from None
        if seed < 0:
            raise UsageError(f"{SEED_ENV} must be a non-negative integer, got '{value}'")
        return replace(self, seed=seed)
