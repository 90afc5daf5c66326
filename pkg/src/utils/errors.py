"""Exception hierarchy shared by the pipeline stages and the CLI."""
from typing import Optional


class NagError(Exception):
    """Base error. ``exit_code`` is what the CLI returns for it."""

    exit_code = 3

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


# ==================== Configuration (exit 1) ====================

class ConfigError(NagError):
    """Invalid configuration, flag combination or request."""
    exit_code = 1


# ==================== Data (exit 2) ====================

class DataError(NagError):
    """Input data that cannot be used."""
    exit_code = 2


class InputError(DataError):
    """Malformed input file content, optionally tied to a line number."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ''
        if path and line is not None:
            where = f" ({path}, line {line})"
        elif line is not None:
            where = f" (line {line})"
        elif path:
            where = f" ({path})"
        super().__init__(f"{message}{where}")


class CacheError(DataError):
    """Token cache could not be loaded."""


class NotATokenCache(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


class TruncatedCache(CacheError):
    pass


class CacheIntegrityError(CacheError):
    pass


class ModelFileError(DataError):
    """Model file could not be loaded."""


class NotAModelFile(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class TruncatedModelFile(ModelFileError):
    pass


class ManifestMismatch(ModelFileError):
    pass


class ModelNotFound(ModelFileError):
    pass


class CompatibilityError(DataError):
    """Artifacts that were produced for different dimensions."""


# ==================== Internal (exit 3) ====================

class InternalError(NagError):
    """Invariant violation inside the library."""
    exit_code = 3


class GradCheckFailure(InternalError):
    """Analytic and numeric gradients disagree; carries the report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
