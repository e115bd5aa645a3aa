"""Exception hierarchy shared across the package.

Two families matter to callers: DataError (invalid or inconsistent input,
missing or malformed files) and NumericError (a computation failed to stay
finite).  The command line maps the families to distinct exit codes.
"""


class ScdKitError(Exception):
    """Base class for every error raised by this package."""


class DataError(ScdKitError, ValueError):
    """Invalid, inconsistent or missing input data."""


class NumericError(ScdKitError, ArithmeticError):
    """A numeric computation diverged or produced non-finite values."""


# audio files and framing

class UnsupportedFormatError(DataError):
    """WAV file uses an encoding this package does not read."""


class CorruptHeaderError(DataError):
    """WAV file is structurally broken (bad magic, truncated chunks)."""


class EmptyAudioError(DataError):
    """WAV file contains no samples."""


class ClipTooShortError(DataError):
    """Clip is shorter than one analysis window."""


class SampleRateMismatchError(DataError):
    """Clip sample rate differs from the configured rate; no resampling."""


# voice activity detection

class TooFewValuesError(DataError):
    """Not enough values to build a threshold histogram."""


class MaskMismatchError(DataError):
    """Voiced/unvoiced mask does not match the clip's framing."""


# feature extraction

class TooFewFramesError(DataError):
    """Not enough frames for the requested context or window."""


# classifier

class DimensionMismatchError(DataError):
    """Array shape inconsistent with the network or feature layout."""


class EmptySpeakerError(DataError):
    """A speaker contributed no usable data."""


class DivergedCostError(NumericError):
    """Training cost became non-finite."""


class FingerprintMismatchError(DataError):
    """Model was produced under a different feature configuration."""


# change detection

class TooShortForIntervalsError(DataError):
    """Sequence does not span at least two complete intervals."""


class EmptyIntervalError(DataError):
    """An interval received no frames."""


class ClassEmptyError(DataError):
    """A Gaussian fit needs at least two samples per class."""


class LengthMismatchError(DataError):
    """Flag and truth sequences differ in length."""


# corpus handling

class MissingManifestError(DataError):
    """Dataset manifest absent, unreadable, or lists a missing file."""


class SpeakerTooShortError(DataError):
    """A speaker's usable audio is shorter than the required minimum."""


class TooManySpeakersError(DataError):
    """More synthetic speakers requested than distinct pitch slots exist."""


class DegenerateFitWarning(UserWarning):
    """Threshold fit fell back to the midpoint between class means."""
