"""Shared exception types."""


class InvariantViolation(RuntimeError):
    """A structural invariant was broken (e.g. wrong actor pushed into a buffer)."""


class EmptySourceError(RuntimeError):
    """An operation needed data from an empty buffer or dataset."""


class InvalidStateError(RuntimeError):
    """Operation called on an environment or loop in the wrong state."""


class UnsupportedEnvironmentError(RuntimeError):
    """Operation only defined for the other environment kind."""


class NoPlanError(RuntimeError):
    """The scripted oracle could not find a path to the goal."""


class UndefinedRatioError(RuntimeError):
    """A ratio metric has an empty denominator."""


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization."""
