"""binloc - supervised binaural co-localization of sound sources"""

__version__ = '0.1.0'

from .gllim import GllimModel, TrainingSet, fit
from .posterior import PosteriorGmm, localize, spectrogram_posterior
from .spectro import BinauralSpectrogram, ComplexSpectrogram, binaural_features, extract, stft

__all__ = [
    'BinauralSpectrogram',
    'ComplexSpectrogram',
    'GllimModel',
    'PosteriorGmm',
    'TrainingSet',
    'binaural_features',
    'extract',
    'fit',
    'localize',
    'spectrogram_posterior',
    'stft',
]
