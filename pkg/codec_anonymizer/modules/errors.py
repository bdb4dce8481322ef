# modules/errors.py
"""Exception hierarchy shared by every module, plus the CLI exit-code map."""


class CodecAnonymizerError(Exception):
    """Base class for all errors raised by this project."""

    exit_code = 2


# -------------------------
# Configuration (exit 1)
# -------------------------
class ConfigError(CodecAnonymizerError):
    exit_code = 1


class ConfigInvalidError(ConfigError, ValueError):
    pass


# -------------------------
# Data / contract errors (exit 2)
# -------------------------
class DataError(CodecAnonymizerError):
    exit_code = 2


class NotWavError(DataError):
    pass


class UnsupportedEncodingError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class IoFailureError(DataError, OSError):
    pass


class EmptyContourError(DataError, ValueError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class LengthMismatchError(DataError, ValueError):
    pass


class ScaleMismatchError(DataError, ValueError):
    pass


class InputTooShortError(DataError, ValueError):
    pass


class IndexOutOfRangeError(DataError, IndexError):
    pass


class LabelOutOfRangeError(DataError, ValueError):
    pass


class TooFewSamplesError(DataError, ValueError):
    pass


class TeacherUntrainedError(DataError):
    pass


class ManifestParseError(DataError):
    pass


class DuplicateUtteranceIdError(DataError):
    pass


class MissingAudioError(DataError):
    pass


class DataMissingError(DataError):
    pass


class UtteranceTooShortError(DataError, ValueError):
    pass


class EmptyManifestError(DataError):
    pass


class CheckpointInvalidError(DataError):
    pass


class PoolTooSmallError(DataError, ValueError):
    pass


class PoolFormatError(DataError):
    pass


class MissingEmbeddingError(DataError, KeyError):
    pass


class DegenerateTrialsError(DataError, ValueError):
    pass


class InsufficientVoicedFramesError(DataError, ValueError):
    pass


# -------------------------
# Numeric failures (exit 3)
# -------------------------
class NumericError(CodecAnonymizerError):
    exit_code = 3


class NonFiniteTermError(NumericError, FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"Loss term '{term}' is not finite: {value}")
        self.term = term
        self.value = value


class NonFiniteLossError(NumericError, FloatingPointError):
    pass


def exit_code_for(exc: CodecAnonymizerError) -> int:
    """CLI exit code for a project error: 1 config, 2 data, 3 numeric."""
    return exc.exit_code
