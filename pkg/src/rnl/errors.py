"""Exception hierarchy shared by every module in the package."""


class RNLError(Exception):
    """Base class. ``kind`` is the machine-readable tag used by the CLI."""

    kind = "error"


class DimensionError(RNLError, ValueError):
    kind = "dimension"


class ArgumentError(RNLError, ValueError):
    kind = "argument"


class ContractError(RNLError, RuntimeError):
    kind = "contract"


class UnsupportedOpError(RNLError, NotImplementedError):
    kind = "unsupported-op"


class ShapeError(RNLError, ValueError):
    """Raised by architecture shape propagation."""

    kind = "shape"


class ParseError(RNLError, ValueError):
    kind = "parse"

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class TensorFileError(RNLError, IOError):
    kind = "io"
