"""Exception hierarchy shared by every module of the package."""


class RwfbsdeError(Exception):
    """Base class for all package errors."""


class RegistryError(RwfbsdeError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ValidationError(RwfbsdeError, ValueError):
    pass


class ConfigurationError(RwfbsdeError, ValueError):
    pass


class DomainError(RwfbsdeError, ValueError):
    pass


class NoReferenceError(RwfbsdeError):
    pass


class CapabilityError(RwfbsdeError):
    """A required callback (derivative, reference field) is missing."""


class CapacityError(RwfbsdeError):
    """Requested size exceeds what the chosen backend can enumerate."""


class ConvergenceError(RwfbsdeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class NumericError(RwfbsdeError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EllipticityError(DomainError):
    pass


class StateLookupError(RwfbsdeError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DomainCoverageError(DomainError):
    pass


class RareEventError(RwfbsdeError):
    pass


class InsufficientDataError(RwfbsdeError, ValueError):
    pass
