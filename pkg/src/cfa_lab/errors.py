"""Exception types shared across the library.

Every failure mode that callers are expected to branch on gets its own
class; generic programming errors stay as plain ValueError/RuntimeError.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible; message names the offending axis."""


class ConfigurationError(ValueError):
    """A config value is out of range or inconsistent with another one."""


class GenerationError(RuntimeError):
    """World generation could not satisfy its constraints within the retry budget."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, empty dataset); message carries the step index."""


class ProtocolError(ValueError):
    """A broadcast message is malformed; message names the offending field."""


class CheckpointError(RuntimeError):
    """A checkpoint file is truncated or corrupt; message names the offending entry."""


class DependencyError(RuntimeError):
    """A CLI command needs an artifact produced by an earlier command."""


class NumericError(ArithmeticError):
    """A numeric invariant was violated (non-finite values where finite ones are required)."""


class PreconditionError(ValueError):
    """An operation was called with arguments that violate its stated preconditions."""
