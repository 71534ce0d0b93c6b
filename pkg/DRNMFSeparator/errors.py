"""
errors.py

Exception types shared by the pipeline. The CLI maps them to exit codes:
ConfigError -> 1, NumericError -> 2, AudioIOError (and any OSError) -> 3.
AudioFormatError is also a ValueError but still maps to 3.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class NumericError(ArithmeticError):
    """NaN, Inf or overflow detected in a numerical routine."""


class AudioIOError(OSError):
    """Reading or writing an audio/manifest file failed."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class AudioFormatError(AudioIOError, ValueError):
    """An audio file that reads fine but is not mono 16 kHz PCM."""
