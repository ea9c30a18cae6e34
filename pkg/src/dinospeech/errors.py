"""Exception hierarchy shared by every stage of the pipeline."""


class DinoSpeechError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DinoSpeechError, ValueError):
    """Invalid or unknown configuration values."""


class DataError(DinoSpeechError, ValueError):
    """Malformed, missing or inconsistent input data."""


class FormatError(DataError):
    """A file does not follow the expected binary or text layout."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses an encoding this package does not read."""


class NumericError(DinoSpeechError, ArithmeticError):
    """A computation produced NaN/Inf or hit a singular matrix."""
