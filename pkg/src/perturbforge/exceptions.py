"""Exception hierarchy shared by every module."""


class PerturbForgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PerturbForgeError, ValueError):
    """Operand shapes do not conform to a primitive's rules."""

    def __init__(self, primitive, message):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


class ContractError(PerturbForgeError, ValueError):
    pass


class LineageError(PerturbForgeError):
    """A tensor was not produced on the tape it is being differentiated on."""


class NumericalError(PerturbForgeError, FloatingPointError):
    pass


class TrainingError(PerturbForgeError):
    def __init__(self, epoch, message):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class CorpusError(PerturbForgeError, ValueError):
    pass


class ManifestValidationError(CorpusError):
    def __init__(self, missing):
        self.missing = list(missing)
        listing = "\n  ".join(str(p) for p in self.missing)
        super().__init__(f"{len(self.missing)} referenced file(s) missing:\n  {listing}")


class FormatError(PerturbForgeError, ValueError):
    """Binary artifact (checkpoint, perturbation) failed to parse."""


class DecodeError(PerturbForgeError, ValueError):
    def __init__(self, path, offset, message):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


class DegenerateGradientError(PerturbForgeError, ArithmeticError):
    pass


class UnsupportedModelError(PerturbForgeError, TypeError):
    pass
