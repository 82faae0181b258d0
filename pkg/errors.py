"""Exception hierarchy. Each class knows the CLI exit code it maps to."""

from typing import Any, Dict, List, Optional


class LevyLiborError(ValueError):
    exit_code = 1

    def __init__(self, message: str, details: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.details = details or []


class ConfigError(LevyLiborError):
    exit_code = 2


class GridError(ConfigError):
    """A date, maturity or strike grid that does not line up."""


class AssumptionError(LevyLiborError):
    """Model assumptions (LR1)/(LR2) or driver parameter constraints violated."""

    exit_code = 3


class CumulantDomainError(AssumptionError):
    pass


class NumericalGuardError(LevyLiborError):
    exit_code = 4
