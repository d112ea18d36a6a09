"""Exception hierarchy shared by the engine, the file handlers and the CLI."""


class PrototypeError(Exception):
    """Base class for every error raised by this package."""


class InputError(PrototypeError, ValueError):
    pass


class PreconditionError(PrototypeError, ValueError):
    def __init__(self, message: str, field: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(PrototypeError, ArithmeticError):
    pass


class ConfigurationError(PrototypeError, ValueError):
    pass


class TrainingError(PrototypeError, RuntimeError):
    pass


class CertificationError(PrototypeError, RuntimeError):
    """Internal inconsistency between a certificate and the model output."""


class DataFormatError(PrototypeError, ValueError):
    pass


class ModelLoadError(PrototypeError, ValueError):
    def __init__(self, message: str, field: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
