"""DINO-style self-supervised utterance embeddings and a label-free speaker verification pipeline."""

from .errors import ConfigError, DataError, DinoSpeechError, FormatError, NumericError, UnsupportedFormatError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DinoSpeechError",
    "FormatError",
    "NumericError",
    "UnsupportedFormatError",
    "__version__",
]
