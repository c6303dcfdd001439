"""Binaural cue sets and their row layout in feature spectrograms"""

from enum import Enum
from typing import Dict, List, Tuple

import numpy as np


class Cue(Enum):
    """Cue sets that can make up a binaural feature vector"""
    ILPD = "ilpd"
    ILD = "ild"
    IPD = "ipd"


# Blocks of F rows each, in storage order
CUE_BLOCKS: Dict[Cue, Tuple[str, ...]] = {
    Cue.ILPD: ("ild", "ipd_real", "ipd_imag"),
    Cue.ILD: ("ild",),
    Cue.IPD: ("ipd_real", "ipd_imag"),
}


def blocks_per_bin(cue: Cue) -> int:
    """Number of feature rows generated by one frequency bin"""
    return len(CUE_BLOCKS[cue])


def cue_from_dims(D: int, F: int) -> Cue:
    """Recover the cue set from the feature and frequency dimensions"""
    if F <= 0 or D % F != 0:
        raise ValueError(f"feature dimension {D} is not a multiple of F={F}")
    ratio = D // F
    for cue in (Cue.ILPD, Cue.IPD, Cue.ILD):
        if blocks_per_bin(cue) == ratio:
            return cue
    raise ValueError(f"no cue layout has {ratio} blocks per frequency bin")


def split_blocks(features: np.ndarray, cue: Cue) -> Dict[str, np.ndarray]:
    """Split a D x T feature matrix into its named F x T blocks"""
    names = CUE_BLOCKS[cue]
    F = features.shape[0] // len(names)
    return {name: features[i * F:(i + 1) * F] for i, name in enumerate(names)}


def stack_blocks(blocks: Dict[str, np.ndarray], cue: Cue) -> np.ndarray:
    """Stack named F x T blocks into the layout of a cue set"""
    return np.concatenate([blocks[name] for name in CUE_BLOCKS[cue]], axis=0)


def parse_cue(value: str) -> Cue:
    """Cue from its command-line name"""
    try:
        return Cue(value.lower())
    except ValueError:
        choices: List[str] = [c.value for c in Cue]
        raise ValueError(f"unknown cue set '{value}', expected one of {choices}") from None
