"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violates an operation's preconditions (non-finite values,
    dimension mismatches, degenerate geometry)."""


class ConfigError(ValueError):
    """A configuration key is unknown, ill-typed, or violates a constraint.

    Carries the offending key path in ``key`` when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TrainingStepError(RuntimeError):
    """A training step produced a non-finite loss. ``component`` names the
    first offending loss term."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class EmptyForegroundError(RuntimeError):
    """Foreground ray selection found no surviving rays; the caller may
    resample the instance."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or incompatible with the current run
    (version or generator hash mismatch)."""


class FitError(RuntimeError):
    """Generator fitting exhausted its budget without reaching the held-out
    tolerance. ``held_out_error`` reports the final value."""

    def __init__(self, message, held_out_error=None):
        super().__init__(message)
        self.held_out_error = held_out_error
