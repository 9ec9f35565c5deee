"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so each family gets its own class.
"""


class HdlcError(Exception):
    """Base class for every error raised by this package."""


class InputError(HdlcError):
    """Bad user input or configuration (CLI exit code 2)."""


class TaxonomyError(HdlcError):
    """Problems with ISA maps or hierarchy trees (CLI exit code 3)."""


class TaxonomyParseError(TaxonomyError, InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CycleError(TaxonomyError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle in ISA relation: " + " -> ".join(str(s) for s in self.cycle))


class SpecError(InputError):
    """A network spec fails shape inference or validation."""

    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class ShapeError(HdlcError, ValueError):
    """Operand shapes disagree."""


class NonFiniteError(HdlcError, FloatingPointError):
    """A gradient or update contains NaN or inf."""


class ContractError(HdlcError, ValueError):
    """A documented precondition was violated by the caller."""


class DatasetError(InputError):
    pass


class ImageFormatError(InputError):
    pass


class ContainerError(InputError):
    """Base for model container read failures."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class PayloadLengthError(ContainerError):
    pass


class VerificationError(HdlcError):
    """A gradient check exceeded its tolerance (CLI exit code 4)."""
