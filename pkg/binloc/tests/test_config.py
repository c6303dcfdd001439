import pytest

from binloc.config import RunConfig, SEED_ENV, UsageError
from binloc.gllim import PriorMode
from binloc.simroom import SourceKind
from binloc.utils.cues import Cue


def test_defaults():
    """Test single-source defaults"""
    config = RunConfig().validate()
    assert config.F == 512
    assert config.resolved_K == 32
    assert config.resolved_threshold == 5.0
    assert config.resolved_max_lag == 14.0
    assert config.grid.size == 24 * 18
    assert config.cue_set is Cue.ILPD
    assert config.prior is PriorMode.FREE


def test_two_source_defaults():
    """Test defaults that depend on the source count"""
    config = RunConfig(num_sources=2)
    assert config.resolved_K == 100
    assert RunConfig(num_sources=2, fast=True).resolved_K == 20
    assert config.resolved_threshold == 15.0
    assert config.mixture_kinds == [SourceKind.SPARSE, SourceKind.SPARSE]
    assert not config.identical
    assert RunConfig(num_sources=2, mixture='identical').identical


def test_explicit_values_win():
    """Test that explicit values override derived defaults"""
    config = RunConfig(K=7, threshold=2.5, max_lag=6.0)
    assert config.resolved_K == 7
    assert config.resolved_threshold == 2.5
    assert config.resolved_max_lag == 6.0


@pytest.mark.parametrize("overrides,flag", [
    ({'hop': 0}, '--hop'),
    ({'window_len': 31}, '--window-len'),
    ({'num_sources': 3}, '--num-sources'),
    ({'occupancy': 0.0}, '--occupancy'),
    ({'K': 0}, '--K'),
    ({'mixture': 'pink'}, '--mixture'),
    ({'cue': 'itd'}, '--cue'),
    ({'test_az': 24}, '--test-az'),
    ({'min_sep': 30.0}, '--min-sep'),
    ({'max_lag': 600.0}, '--max-lag'),
])
def test_validation_names_the_flag(overrides, flag):
    """Test that validation errors name the offending flag"""
    with pytest.raises(UsageError, match=flag):
        RunConfig(**overrides).validate()


def test_seed_from_environment():
    """Test that BINLOC_SEED overrides the seed"""
    config = RunConfig(seed=1).with_env({SEED_ENV: '42'})
    assert config.seed == 42
    assert RunConfig(seed=1).with_env({}).seed == 1


def test_bad_seed_environment():
    """Test rejection of a malformed BINLOC_SEED"""
    with pytest.raises(UsageError, match=SEED_ENV):
        RunConfig().with_env({SEED_ENV: 'abc'})
    with pytest.raises(UsageError, match=SEED_ENV):
        RunConfig().with_env({SEED_ENV: '-3'})
