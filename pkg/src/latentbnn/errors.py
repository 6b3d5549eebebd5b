"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class DataError(Exception):
    """A dataset file is missing, malformed or inconsistent."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite during training."""


class StateError(RuntimeError):
    """An operation was invoked in a state that cannot support it."""


class FormatError(DataError):
    """A checkpoint or export container could not be decoded."""
