"""Exception hierarchy.

Every error carries a ``stage`` label and a ``details`` mapping so the CLI can
serialize it as a structured record.
"""

from __future__ import annotations

from typing import Any


class DichotomyLabError(Exception):
    stage = "general"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {
            "error": type(self).__name__,
            "stage": self.stage,
            "message": self.message,
            "details": self.details,
        }


class DomainError(DichotomyLabError, ValueError):
    """Input outside the domain an operation is defined on."""


class ConfigError(DichotomyLabError, ValueError):
    stage = "config"

    def __init__(self, message: str, path: str = "", **details: Any):
        super().__init__(message, path=path, **details)
        self.path = path


class NotHyperbolicError(DichotomyLabError):
    stage = "spectrum"

    def __init__(self, message: str, z: float, branch: str | None = None,
                 margin: float | None = None):
        super().__init__(message, z=z, branch=branch, margin=margin)
        self.z = z
        self.branch = branch
        self.margin = margin


class RectangleOnRootError(DichotomyLabError):
    stage = "spectrum"


class ResolventError(DichotomyLabError):
    stage = "green"


class PreconditionError(DichotomyLabError):
    stage = "green"


class DivergenceError(DichotomyLabError):
    stage = "green"


class DegenerateFitError(DichotomyLabError):
    stage = "green"


class BlowUpError(DichotomyLabError):
    stage = "evolution"


class KernelObstructionError(DichotomyLabError):
    stage = "dichotomy"


class DomainTooSmallError(DichotomyLabError):
    stage = "dichotomy"


class FSpaceDegeneracyError(DichotomyLabError):
    stage = "dichotomy"
