"""Exception types shared across the library.

The CLI maps these onto process exit codes: configuration problems exit
with 1, data/format problems with 2, runtime failures with 3.
"""


class SeistileError(Exception):
    """Base class for all library errors."""


class DimensionError(SeistileError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SeistileError):
    """An API precondition was violated (misuse, not data)."""


class ParseError(SeistileError):
    """Topology DSL text could not be parsed."""


class TopologyError(SeistileError):
    """A parsed topology violates a structural invariant."""


class ConfigError(SeistileError):
    """A run configuration is missing, malformed, or inconsistent."""


class FormatError(SeistileError):
    """A binary file does not match its declared format."""


class CorruptionError(FormatError):
    """A binary file has a valid header but a truncated/oversized payload."""


class LabelError(SeistileError):
    """A label value lies outside the valid class range."""


class DegenerateBatchError(SeistileError):
    """Batch statistics were requested over fewer than two elements."""


class DivergenceError(SeistileError):
    """Training produced non-finite values.

    Carries the last good checkpoint (if any) in ``checkpoint``.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
