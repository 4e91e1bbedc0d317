"""Exception hierarchy shared across the package.

The CLI maps :class:`InputError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""


class InputError(ValueError):
    """Malformed or inconsistent user input (config, CSV, model spec)."""


class ModelError(InputError):
    """A parameter set, covariate vector or spec does not fit together."""


class ConfigError(InputError):
    """Invalid run configuration; carries the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(RuntimeError):
    """A numerical procedure failed or produced an invalid result."""


class ImpossibleTransitionError(NumericalError):
    """An observed interval has transition probability exactly zero."""

    def __init__(self, subject_id, t0, t1, from_state, to_state):
        self.subject_id = subject_id
        self.t0 = t0
        self.t1 = t1
        self.from_state = from_state
        self.to_state = to_state
        super().__init__(
            f"subject {subject_id!r}: observed {from_state}->{to_state} over "
            f"[{t0:g}, {t1:g}] has probability 0 under the model"
        )
