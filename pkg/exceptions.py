"""
Exception hierarchy shared by the pipeline modules.
"""
from typing import Any, Dict, Optional


class WhiskerSimError(Exception):
    """Base class for every error raised by the pipeline."""


class ValidationError(WhiskerSimError, ValueError):
    """Invalid configuration, geometry or input shape."""


class SolverDivergenceError(WhiskerSimError):
    """The rod equilibrium solver did not converge."""

    def __init__(self, message: str, residual_norm: float, iterations: int):
        super().__init__(f"{message} (residual {residual_norm:.3e} after {iterations} iterations)")
        self.residual_norm = residual_norm
        self.iterations = iterations


class PlacementError(WhiskerSimError):
    """No valid object placement could be sampled."""


class CalibrationError(WhiskerSimError):
    """The GPR calibration could not be fitted."""

    def __init__(self, message: str, configuration: Optional[Dict[str, Any]] = None):
        detail = f" [{configuration}]" if configuration else ""
        super().__init__(f"{message}{detail}")
        self.configuration = configuration or {}


class ShapeMismatchError(ValidationError):
    """Tensor or sequence shapes do not match the model contract."""


class NonFiniteActivationError(WhiskerSimError):
    """A forward pass produced NaN or infinite activations."""

    def __init__(self, layer: str):
        super().__init__(f"Non-finite activation in layer '{layer}'")
        self.layer = layer


class TrainingDivergedError(WhiskerSimError):
    """Training loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Any = None, history: Any = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


class SchemaError(WhiskerSimError):
    """A persisted artifact does not match its schema."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class MissingArtifactError(WhiskerSimError):
    """A required input artifact is missing."""

    def __init__(self, path: str, hint: str):
        super().__init__(f"Missing artifact {path}. {hint}")
        self.path = path
        self.hint = hint
