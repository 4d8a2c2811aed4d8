"""Exception hierarchy shared by all pipeline stages."""


class RadiomicsError(Exception):
    """Base class for domain errors raised by this package."""


class DimensionError(RadiomicsError, ValueError):
    """An array does not have the shape an operation requires."""


class LabelError(RadiomicsError, ValueError):
    """A class label lies outside the valid range."""


class ConfigError(RadiomicsError, ValueError):
    """A configuration value is invalid or inconsistent."""


class SplitError(RadiomicsError):
    """A requested partition of the cohort cannot be realised."""


class TrainingError(RadiomicsError):
    """Sequencer discovery could not run or diverged."""


class FormatError(RadiomicsError):
    """A serialized artifact could not be parsed.

    ``offset`` is a byte offset for binary formats and ``line`` a 1-based line
    number for text formats; whichever does not apply is None.
    """

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class InvariantViolation(FormatError):
    pass
