"""Exception hierarchy shared by every tokenad module."""


class TokenADError(Exception):
    pass


class DimensionError(TokenADError, ValueError):
    pass


class NormalizationError(TokenADError, ValueError):
    pass


class ContractError(TokenADError, RuntimeError):
    pass


class ConfigError(TokenADError, ValueError):
    pass


class LoadError(TokenADError, IOError):
    pass


class CheckpointError(LoadError):
    """Raised for malformed or corrupted checkpoint files (bad magic, CRC)."""


class GenerationError(TokenADError, RuntimeError):
    pass


class UndefinedMetricError(TokenADError, ValueError):
    pass


class DegenerateSpectrumError(TokenADError, ValueError):
    pass


class NonFiniteLossError(TokenADError, FloatingPointError):
    def __init__(self, component: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component '{component}' = {value}{where}")
        self.component = component
        self.value = value
        self.step = step
