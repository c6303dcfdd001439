"""Stereo audio readers: WAV (16-bit PCM / 32-bit float) and raw float32 with a JSON sidecar"""

import json
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.io import wavfile

from .logger import setup_logger

logger = setup_logger(__name__)


def sidecar_path(path: Path) -> Path:
    """JSON sidecar holding the sample rate of a raw recording"""
    return path.with_suffix(path.suffix + '.json')


def read_stereo(path: Path) -> Tuple[np.ndarray, np.ndarray, int]:
    """Read a two-channel recording; returns (left, right, sample_rate) as float64 in [-1, 1]"""
    path = Path(path)
    if path.suffix.lower() == '.wav':
        sample_rate, data = wavfile.read(path)
        if data.dtype == np.int16:
            data = data.astype(np.float64) / 32768.0
        elif data.dtype == np.float32:
            data = data.astype(np.float64)
        else:
            raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    else:
        header_path = sidecar_path(path)
        if not header_path.exists():
            raise ValueError(f"{path}: raw audio needs a sidecar header {header_path.name}")
        header = json.loads(header_path.read_text())
        sample_rate = int(header['sample_rate'])
        channels = int(header['channels'])
        data = np.fromfile(path, dtype='<f4').astype(np.float64)
        if channels <= 0 or data.size % channels:
            raise ValueError(f"{path}: sample count {data.size} does not match {channels} channels")
        data = data.reshape(-1, channels)

    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError(f"{path}: expected 2 channels, found {1 if data.ndim == 1 else data.shape[1]}")
    logger.debug(f"Read {data.shape[0]} frames at {sample_rate} Hz from {path}")
    return data[:, 0].copy(), data[:, 1].copy(), int(sample_rate)


def write_raw_stereo(path: Path, left: np.ndarray, right: np.ndarray, sample_rate: int) -> None:
    """Write interleaved float32 samples and the JSON sidecar header"""
    path = Path(path)
    interleaved = np.stack([left, right], axis=1).astype('<f4')
    interleaved.tofile(path)
    sidecar_path(path).write_text(json.dumps({'sample_rate': int(sample_rate), 'channels': 2}))
