"""Exception hierarchy for the PETALface toolkit.

Every error carries the process exit code the command line reports for it:
1 for configuration and usage problems, 2 for data problems, 3 for numeric
failures.
"""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class PetalError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_DATA


class ConfigurationError(PetalError, ValueError):
    """Invalid configuration value, unknown key or bad construction argument."""

    exit_code = EXIT_CONFIG


class DimensionError(PetalError, ValueError):
    """Tensor shape does not match the layer it is fed to."""

    exit_code = EXIT_DATA


class GatingError(PetalError, ValueError):
    """Quality score or blend weight outside its admissible domain."""

    exit_code = EXIT_NUMERIC


class InputError(PetalError, ValueError):
    """Empty, unreadable or malformed input data."""

    exit_code = EXIT_DATA


class ManifestError(InputError):
    """Dataset manifest missing, empty or violating its protocol."""


class ProtocolError(PetalError, ValueError):
    """Evaluation protocol precondition violated (e.g. probe identity not enrolled)."""

    exit_code = EXIT_DATA


class ROCError(ProtocolError):
    """ROC requested on scores with a single label class."""


class NumericError(PetalError, ArithmeticError):
    """Non-finite loss or degenerate numeric input."""

    exit_code = EXIT_NUMERIC


class StateError(PetalError, RuntimeError):
    """Operation applied to a model in the wrong state."""

    exit_code = EXIT_DATA


class IncompatibleCheckpointError(PetalError, ValueError):
    """Checkpoint was produced for a different injection configuration."""

    exit_code = EXIT_DATA


class CorruptCheckpointError(PetalError, ValueError):
    """Checkpoint archive is unreadable or missing tensors."""

    exit_code = EXIT_DATA


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the command-line exit code."""
    if isinstance(exc, PetalError):
        return exc.exit_code
    if isinstance(exc, FileNotFoundError):
        return EXIT_DATA
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_DATA
