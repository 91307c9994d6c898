"""Exception hierarchy shared by all modules."""


class Se3FlowError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(Se3FlowError, ValueError):
    pass


class CutLocusError(Se3FlowError, ArithmeticError):
    """A relative rotation reached angle pi, where the logarithm is not unique."""

    def __init__(self, angle: float, message: str | None = None):
        self.angle = float(angle)
        super().__init__(
            message or f"rotation angle {self.angle:.9f} rad is on the cut locus (pi)"
        )


class NumericFailure(Se3FlowError, ArithmeticError):
    """Non-finite or out-of-range numbers appeared during computation."""

    def __init__(self, message: str, layer: int | None = None,
                 epoch: int | None = None, sample: int | None = None):
        self.layer = layer
        self.epoch = epoch
        self.sample = sample
        super().__init__(message)


class IntegrationFailure(Se3FlowError, RuntimeError):
    """The ODE solver gave up; ``path`` holds whatever was integrated so far."""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(message)


class FormatError(Se3FlowError, ValueError):
    """A binary or text file does not match its documented layout."""

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        self.offset = offset
        self.line = line
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ConfigError(Se3FlowError, ValueError):
    pass
