from typing import Any, Dict, Optional


class EVPError(Exception):
    """Base error. `exit_code` is what the CLI returns, `status_code` what the API answers."""

    exit_code: int = 1
    status_code: int = 400

    def __init__(self, message: str, payload: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.payload = payload or {}

    def __str__(self):
        if self.payload:
            return f"{self.message} ({self.payload})"
        return self.message


class ConfigError(EVPError):
    exit_code = 3


class GeometryError(ConfigError):
    pass


class CompositionError(ConfigError):
    pass


class ShapeError(ConfigError):
    pass


class InvalidInputError(ConfigError):
    pass


class CapacityError(ConfigError):
    pass


class DatasetError(EVPError):
    exit_code = 4
    status_code = 404


class NumericError(EVPError):
    exit_code = 5
    status_code = 500


class OutputError(EVPError):
    exit_code = 6
    status_code = 500


class IntegrityError(EVPError):
    """Frozen weights changed during a run."""

    exit_code = 7
    status_code = 500
