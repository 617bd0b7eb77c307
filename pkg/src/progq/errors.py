"""
Exception hierarchy for progq.

Every error carries a short code and a details dict so the CLI can print
a useful diagnostic without a traceback. Each class also derives from the
closest builtin so callers that only know about ValueError still work.
"""

from datetime import datetime
from typing import Any, Dict, Optional


class ProgQError(Exception):
    """Base exception for progq operations"""

    def __init__(self, message: str, code: str = "E000", details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.code = code
        self.details = details or {}
        self.timestamp = datetime.now().isoformat()
        super().__init__(message)

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


class ConfigurationError(ProgQError, ValueError):
    """Invalid hyperparameters, paths or command options"""

    def __init__(self, message: str, suggestion: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        self.suggestion = suggestion
        super().__init__(message, "E001", details)


class ShapeError(ProgQError, ValueError):
    """Dimension mismatch between vectors, codebooks or heads"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E010", details)


class EmptyInputError(ProgQError, ValueError):
    """Empty batch, label set or query set"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E011", details)


class CodeRangeError(ProgQError, ValueError):
    """Index does not fit its bit field, or a prefix length is out of range"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E020", details)


class CodeLengthError(ProgQError, ValueError):
    """Code or file shorter than its declared contents"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E021", details)


class FormatError(ProgQError, ValueError):
    """Malformed file contents"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E030", details)


class CorruptionError(ProgQError, ValueError):
    """Stored data does not agree with the model it claims to belong to"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E040", details)


class DivergenceError(ProgQError, ArithmeticError):
    """Training loss became NaN or infinite"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E050", details)


class EncodingError(ProgQError, ValueError):
    """A database point could not be encoded; details['index'] names it"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "E060", details)


class UsageError(ConfigurationError):
    """A command-line value the configuration rejects; the CLI exits 2 as for parse errors"""
