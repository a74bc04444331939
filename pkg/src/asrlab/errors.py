"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all asrlab errors."""


class FormatError(Error, ValueError):
    """Unsupported or malformed file format."""


class EmptySpectrogramError(Error, ValueError):
    """Waveform too short to produce a single analysis frame."""


class NoPitchError(Error, ValueError):
    """No periodic structure found in the analysis range."""


class ShapeError(Error, ValueError):
    """Tensor shapes incompatible for the requested operation."""


class ConfigError(Error, ValueError):
    """Invalid or inconsistent configuration."""


class StateError(Error, RuntimeError):
    """Operation invalid for the object's current state."""


class ModeError(Error, RuntimeError):
    """Operation not available in the model's mode."""


class LengthError(Error, ValueError):
    """Sequence exceeds the model's position budget."""


class InfeasibleAlignmentError(Error, ValueError):
    """Target cannot be aligned to the available frames."""


class VocabularyError(Error, ValueError):
    """Symbol not representable in the vocabulary."""


class ParseError(Error, ValueError):
    """Malformed manifest or config content."""


class IntegrityError(Error, ValueError):
    """Data violates a uniqueness or cross-reference constraint."""


class SplitError(Error, ValueError):
    """Corpus cannot be split as requested."""


class DivergedError(Error, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class UsageError(Error, ValueError):
    """Bad command-line invocation."""
