"""Segmentation-free printed-text-line recognition toolkit.

Pipeline: grayscale line images -> dense SIFT descriptors -> sparse
autoencoder codebook -> right-to-left bag-of-features frame sequences
-> character HMMs (embedded Baum-Welch training, ergodic Viterbi
decoding) -> edit-distance scoring.
"""

from . import bof, config, corpus, dsift, hmm, imaging, sae, scoring
from .errors import ConfigError, DataError, FormatError

__all__ = [
    "bof",
    "config",
    "corpus",
    "dsift",
    "hmm",
    "imaging",
    "sae",
    "scoring",
    "ConfigError",
    "DataError",
    "FormatError",
]

__version__ = "0.1.0"
