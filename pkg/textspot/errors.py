"""
Error handling system for textspot.

Provides structured error types with rich context information for better debugging
and user experience. Follows Pydantic's error handling patterns.
"""

from typing import Any, Dict, List, Optional


class TextSpotError(Exception):
    """Base exception for textspot."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.message = message
        self.context = context or {}
        super().__init__(message)

    def __str__(self) -> str:
        if self.context:
            context_str = ", ".join(f"{k}={v}" for k, v in self.context.items())
            return f"{self.message} ({context_str})"
        return self.message


class ValidationError(TextSpotError):
    """Raised when validation fails for inputs, datasets, or configurations."""

    def __init__(
        self,
        message: str,
        errors: Optional[List[Dict[str, Any]]] = None,
        context: Optional[Dict[str, Any]] = None
    ):
        self.errors = errors or []
        super().__init__(message, context)

    @classmethod
    def from_pydantic(cls, pydantic_error: Exception, context: Optional[Dict[str, Any]] = None):
        """Create ValidationError from Pydantic ValidationError."""
        if hasattr(pydantic_error, 'errors'):
            errors = [
                {
                    "loc": error.get("loc", ()),
                    "msg": error.get("msg", ""),
                    "type": error.get("type", ""),
                    "input": error.get("input")
                }
                for error in pydantic_error.errors()
            ]
            message = f"Validation failed: {len(errors)} error(s)\n{format_validation_errors(errors)}"
            return cls(message, errors, context)
        return cls(str(pydantic_error), context=context)


class DatasetValidationError(ValidationError):
    """Raised when dataset format or content validation fails."""

    def __init__(
        self,
        message: str,
        file_path: Optional[str] = None,
        record_index: Optional[int] = None,
        field: Optional[str] = None,
        errors: Optional[List[Dict[str, Any]]] = None
    ):
        context: Dict[str, Any] = {}
        if file_path:
            context["file_path"] = file_path
        if record_index is not None:
            context["record_index"] = record_index
        if field:
            context["field"] = field

        super().__init__(message, errors, context)
        self.record_index = record_index
        self.field = field


class ConfigurationError(TextSpotError):
    """Raised when configuration is invalid or missing."""

    def __init__(
        self,
        message: str,
        config_key: Optional[str] = None,
        config_value: Optional[Any] = None,
        valid_options: Optional[List[str]] = None
    ):
        context: Dict[str, Any] = {}
        if config_key:
            context["config_key"] = config_key
        if config_value is not None:
            context["config_value"] = str(config_value)
        if valid_options:
            context["valid_options"] = valid_options

        super().__init__(message, context)


class GeometryError(TextSpotError):
    """Raised for invalid boxes, polygons or box deltas."""

    def __init__(self, message: str, operation: Optional[str] = None, value: Optional[Any] = None):
        context: Dict[str, Any] = {}
        if operation:
            context["operation"] = operation
        if value is not None:
            context["value"] = str(value)[:100]
        super().__init__(message, context)


class ShapeError(TextSpotError):
    """Raised when a tensor or model shape contract is violated."""

    def __init__(
        self,
        message: str,
        component: Optional[str] = None,
        expected: Optional[Any] = None,
        actual: Optional[Any] = None
    ):
        context: Dict[str, Any] = {}
        if component:
            context["component"] = component
        if expected is not None:
            context["expected"] = str(expected)
        if actual is not None:
            context["actual"] = str(actual)
        super().__init__(message, context)


class MaskCodecError(TextSpotError):
    """Raised when the PCA mask basis cannot be fitted or applied."""

    def __init__(self, message: str, n_pca: Optional[int] = None, num_masks: Optional[int] = None):
        context: Dict[str, Any] = {}
        if n_pca is not None:
            context["n_pca"] = n_pca
        if num_masks is not None:
            context["num_masks"] = num_masks
        super().__init__(message, context)


class CheckpointError(TextSpotError):
    """Raised when a checkpoint is missing or incompatible with the model."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        expected: Optional[Any] = None,
        actual: Optional[Any] = None
    ):
        context: Dict[str, Any] = {}
        if path:
            context["path"] = path
        if expected is not None:
            context["expected"] = str(expected)
        if actual is not None:
            context["actual"] = str(actual)
        super().__init__(message, context)


class NumericalFaultError(TextSpotError):
    """Raised when activations or losses stop being finite."""

    def __init__(
        self,
        message: str,
        stage: Optional[int] = None,
        proposal: Optional[int] = None,
        iteration: Optional[int] = None,
        last_checkpoint: Optional[str] = None
    ):
        context: Dict[str, Any] = {}
        if stage is not None:
            context["stage"] = stage
        if proposal is not None:
            context["proposal"] = proposal
        if iteration is not None:
            context["iteration"] = iteration
        if last_checkpoint:
            context["last_checkpoint"] = last_checkpoint
        super().__init__(message, context)
        self.stage = stage
        self.proposal = proposal
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint


class MetricCalculationError(TextSpotError):
    """Raised when metric calculation fails."""

    def __init__(
        self,
        message: str,
        metric_name: Optional[str] = None,
        image: Optional[str] = None
    ):
        context: Dict[str, Any] = {}
        if metric_name:
            context["metric_name"] = metric_name
        if image:
            context["image"] = image
        super().__init__(message, context)


def format_validation_errors(errors: List[Dict[str, Any]]) -> str:
    """Format validation errors for human-readable output."""
    if not errors:
        return "No validation errors"

    formatted = []
    for error in errors:
        loc = " -> ".join(str(x) for x in error.get("loc", []))
        msg = error.get("msg", "Unknown error")
        formatted.append(f"  {loc}: {msg}")

    return "\n".join(formatted)


# CLI exit codes: 0 ok, 1 usage, 2 data error, 3 numeric fault
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(error, NumericalFaultError):
        return EXIT_NUMERIC
    if isinstance(error, (DatasetValidationError, CheckpointError, MaskCodecError)):
        return EXIT_DATA
    if isinstance(error, (ConfigurationError, ValidationError)):
        return EXIT_USAGE
    if isinstance(error, TextSpotError):
        return EXIT_DATA
    return EXIT_USAGE
