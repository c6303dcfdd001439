import json

import numpy as np
import pytest
from scipy.io import wavfile

from binloc.utils.audio import read_stereo, sidecar_path, write_raw_stereo


def test_raw_float32_with_sidecar(tmp_path):
    """Test raw float32 recordings round trip through their JSON sidecar"""
    rng = np.random.default_rng(0)
    left = rng.uniform(-1, 1, 300).astype(np.float32)
    right = rng.uniform(-1, 1, 300).astype(np.float32)
    path = tmp_path / 'take.raw'
    write_raw_stereo(path, left, right, 22050)
    assert json.loads(sidecar_path(path).read_text()) == {'sample_rate': 22050, 'channels': 2}

    read_left, read_right, rate = read_stereo(path)
    assert rate == 22050
    np.testing.assert_array_equal(read_left, left.astype(np.float64))
    np.testing.assert_array_equal(read_right, right.astype(np.float64))


def test_raw_without_sidecar(tmp_path):
    """Test that a raw recording without its sidecar is rejected"""
    path = tmp_path / 'take.raw'
    np.zeros(8, dtype='<f4').tofile(path)
    with pytest.raises(ValueError, match="sidecar"):
        read_stereo(path)


def test_int16_wav_is_scaled(tmp_path):
    """Test int16 WAV samples are scaled into [-1, 1]"""
    path = tmp_path / 'take.wav'
    data = np.array([[16384, -32768], [0, 8192]], dtype=np.int16)
    wavfile.write(path, 16000, data)
    left, right, rate = read_stereo(path)
    assert rate == 16000
    np.testing.assert_allclose(left, [0.5, 0.0])
    np.testing.assert_allclose(right, [-1.0, 0.25])


def test_mono_wav_is_rejected(tmp_path):
    """Test that single-channel WAV files are rejected"""
    path = tmp_path / 'mono.wav'
    wavfile.write(path, 16000, np.zeros(64, dtype=np.float32))
    with pytest.raises(ValueError, match="expected 2 channels"):
        read_stereo(path)
