"""Input validation helpers and the package exception hierarchy."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class RoverBenchError(Exception):
    """Base class for errors raised by roverbench."""


class TrajectoryFormatError(RoverBenchError, ValueError):
    def __init__(self, message: str, lineno: int | None = None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateGeometryError(RoverBenchError, ArithmeticError):
    """Raised when a registration or alignment problem is unconstrained."""


class AssociationError(RoverBenchError, ValueError):
    pass


class ConfigError(RoverBenchError, ValueError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class StageError(RoverBenchError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


def check_points(points, *, min_points: int = 1, name: str = "points") -> np.ndarray:
    """Validate an ``(n, 3)`` float array of finite coordinates."""
    arr = check_array(
        points,
        dtype=np.float64,
        ensure_min_samples=min_points,
        input_name=name,
    )
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


def check_unit_vector(v, *, tol: float = 1e-9, name: str = "direction") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)) or abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValueError(f"{name} must be a unit 3-vector (|v| = {np.linalg.norm(v):.12g})")
    return v


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value
