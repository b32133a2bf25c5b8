"""Exception hierarchy.

``InputError`` subclasses describe bad or unreadable inputs (CLI exit code 2);
``FitError`` subclasses describe numerical failures while fitting (exit code 3).
"""


class MammoAgeError(Exception):
    """Base class for all package errors."""


class InputError(MammoAgeError):
    pass


class ParseError(InputError):
    def __init__(self, token, message=None):
        self.token = token
        super().__init__(message or f"cannot parse token {token!r}")


class ConflictError(InputError):
    pass


class ManifestError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DecodeError(InputError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode {self.path}" + (f": {reason}" if reason else ""))


class FormatError(InputError):
    pass


class ModelError(InputError):
    pass


class ShapeError(InputError):
    pass


class TagError(InputError):
    pass


class RangeError(InputError):
    pass


class FitError(MammoAgeError):
    pass


class SeparationError(FitError):
    pass


class SingularError(FitError):
    pass


class DegenerateError(FitError):
    pass
