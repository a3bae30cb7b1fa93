class KeelLabError(Exception):
    """Base class for all errors raised by keellab."""


class DimensionError(KeelLabError, ValueError):
    pass


class NumericDomainError(KeelLabError, ArithmeticError):
    pass


class ContractError(KeelLabError, ValueError):
    pass


class ConfigError(KeelLabError, ValueError):
    pass


class IntegrityError(KeelLabError):
    """Checkpoint bytes do not match their recorded digest or layout."""


class NumericOverflow(KeelLabError, ArithmeticError):
    """A forward activation became non-finite.

    ``layer_index`` is the sub-layer whose output overflowed, or -1 for the
    embedding/head.
    """

    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite activation at sub-layer {layer_index}")
