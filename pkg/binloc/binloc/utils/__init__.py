"""Shared helpers: logging, numerics, cue layout, audio I/O and worker pools"""

from .cues import Cue
from .logger import set_level, setup_logger

__all__ = ['Cue', 'set_level', 'setup_logger']
