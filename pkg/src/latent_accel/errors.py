"""
Error Types and Classification for the latent ODE accelerator

Defines failure categories, the package exception class, and the rules that
decide which failures a sweep may record and step over.
"""

import traceback
import uuid
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, Optional


class ErrorType(Enum):
    """Categories of failures raised by the package."""

    # Numerical failures during evaluation or integration
    NON_FINITE = "non_finite"
    STEP_UNDERFLOW = "step_underflow"
    MAX_STEPS = "max_steps"
    DIVERGENCE = "divergence"

    # Linear algebra
    RANK_DEFICIENT = "rank_deficient"
    LINEAR_SOLVE = "linear_solve"

    # Inputs and state
    DOMAIN = "domain"
    GRID_MISMATCH = "grid_mismatch"
    CONFIGURATION = "configuration"

    # Files
    CHECKPOINT_FORMAT = "checkpoint_format"
    IO = "io"


class ErrorSeverity(Enum):
    """Error severity levels."""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


@dataclass
class LatentSimError(Exception):
    """Exception raised for every documented failure of the package."""

    message: str
    error_type: ErrorType
    severity: Optional[ErrorSeverity] = None
    context: Optional[Dict[str, Any]] = None
    timestamp: Optional[datetime] = None
    error_id: Optional[str] = None
    stack_trace: Optional[str] = None

    def __post_init__(self):
        if self.timestamp is None:
            self.timestamp = datetime.now(timezone.utc)

        if self.error_id is None:
            self.error_id = str(uuid.uuid4())

        if self.stack_trace is None:
            self.stack_trace = traceback.format_exc()

        if self.severity is None:
            self.severity = ErrorClassifier.determine_severity(self.error_type)

        if self.context is None:
            self.context = {}

    @property
    def recoverable(self) -> bool:
        return ErrorClassifier.is_recoverable(self.error_type)

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary format."""
        data = asdict(self)
        data['error_type'] = self.error_type.value
        data['severity'] = self.severity.value if self.severity else None
        data['timestamp'] = self.timestamp.isoformat() if self.timestamp else None
        data.pop('stack_trace', None)
        return data

    def __str__(self) -> str:
        if self.context:
            details = ", ".join(f"{k}={v}" for k, v in self.context.items())
            return f"LatentSimError({self.error_type.value}): {self.message} [{details}]"
        return f"LatentSimError({self.error_type.value}): {self.message}"


class ErrorClassifier:
    """Severity and recoverability rules for error types."""

    SEVERITY_MAPPING = {
        ErrorType.NON_FINITE: ErrorSeverity.MEDIUM,
        ErrorType.STEP_UNDERFLOW: ErrorSeverity.MEDIUM,
        ErrorType.MAX_STEPS: ErrorSeverity.LOW,
        ErrorType.DIVERGENCE: ErrorSeverity.HIGH,
        ErrorType.RANK_DEFICIENT: ErrorSeverity.HIGH,
        ErrorType.LINEAR_SOLVE: ErrorSeverity.HIGH,
        ErrorType.DOMAIN: ErrorSeverity.MEDIUM,
        ErrorType.GRID_MISMATCH: ErrorSeverity.MEDIUM,
        ErrorType.CONFIGURATION: ErrorSeverity.HIGH,
        ErrorType.CHECKPOINT_FORMAT: ErrorSeverity.HIGH,
        ErrorType.IO: ErrorSeverity.CRITICAL,
    }

    # A sweep records these and moves on to the next point
    RECOVERABLE_ERRORS = {
        ErrorType.NON_FINITE,
        ErrorType.STEP_UNDERFLOW,
        ErrorType.MAX_STEPS,
        ErrorType.DIVERGENCE,
        ErrorType.DOMAIN,
    }

    @classmethod
    def determine_severity(cls, error_type: ErrorType) -> ErrorSeverity:
        """Determine severity level for an error type."""
        return cls.SEVERITY_MAPPING.get(error_type, ErrorSeverity.MEDIUM)

    @classmethod
    def is_recoverable(cls, error_type: ErrorType) -> bool:
        """Check if an error type is recoverable."""
        return error_type in cls.RECOVERABLE_ERRORS
