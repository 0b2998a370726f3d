# src/attention_reid/errors.py

from __future__ import annotations


class ReidError(Exception):
    """
    Root of every error raised on purpose by attention_reid.

    Each subclass also derives from the builtin a caller would expect
    (ValueError for bad inputs, RuntimeError for failures while running),
    so ``except ValueError`` keeps working for callers that do not know
    about this hierarchy.
    """

    exit_code: int = 1


class DimensionError(ReidError, ValueError):
    """Shapes do not line up (matmul, conv arithmetic, empty softmax...)."""

    exit_code = 2


class ConfigurationError(ReidError, ValueError):
    """Unknown key/kind, or a config that contradicts the data it meets."""

    exit_code = 2


class UsageError(ReidError, ValueError):
    """The call itself is invalid (non-scalar root, bad step list, ...)."""

    exit_code = 2


class DegenerateInputError(ReidError, ValueError):
    """L2 normalisation of a (near) zero vector: a dead embedding."""

    exit_code = 5


class ProtocolError(ReidError, ValueError):
    """Evaluation protocol precondition violated (missing true match...)."""

    exit_code = 4


class MiningError(ReidError, RuntimeError):
    """A mini-batch admits no valid triplet; the caller must resample."""

    exit_code = 5


class NumericalError(ReidError, RuntimeError):
    """NaN/Inf in a forward value, a gradient or a loss."""

    exit_code = 5


# Exit code for unreadable / unwritable paths (builtin OSError).
IO_EXIT_CODE = 3
