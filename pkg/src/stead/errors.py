"""Exception hierarchy shared across the package."""


class SteadError(Exception):
    """Base class; the CLI prints ``<ClassName>: <message>`` on one line."""


class DimensionError(SteadError, ValueError):
    pass


class ContractError(SteadError, ValueError):
    """A documented precondition was violated."""


class NonFiniteError(SteadError, FloatingPointError):
    pass


class NumericalUnderflowError(SteadError, FloatingPointError):
    pass


class UndefinedMetricError(SteadError, ValueError):
    pass


class ConfigError(SteadError, ValueError):
    pass


class FormatError(SteadError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ManifestError(SteadError, ValueError):
    pass
