"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""


class CrossUttError(Exception):
    kind = "error"


class DimensionError(CrossUttError, ValueError):
    kind = "dimension"


class DegenerateRowError(CrossUttError, ValueError):
    kind = "degenerate-row"


class LengthError(CrossUttError, ValueError):
    kind = "length"


class VocabError(CrossUttError, ValueError):
    kind = "vocab"


class NumericError(CrossUttError, ArithmeticError):
    kind = "numeric"


class SpecError(CrossUttError, ValueError):
    kind = "mask-spec"


class ConfigError(CrossUttError, ValueError):
    kind = "config"


class CapacityError(CrossUttError, ValueError):
    kind = "capacity"


class ManifestError(CrossUttError, ValueError):
    """Malformed manifest. ``line`` is 1-based when known."""

    kind = "manifest"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
