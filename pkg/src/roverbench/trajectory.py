"""Stamped poses, trajectories and the TUM interchange format."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import RigidTransform, quat_multiply, quat_normalize, matrix_to_quat
from .validation import TrajectoryFormatError

QUAT_TOL = 1e-9


class PoseStamped(NamedTuple):
    t: float
    p: np.ndarray
    q: np.ndarray

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform.from_quat(self.q, self.p)


@dataclass
class Trajectory:
    """Time-ordered poses; ``q[k]`` rotates the body frame into ``frame``."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 4)
        n = len(self.t)
        if len(self.p) != n or len(self.q) != n:
            raise ValueError("t, p and q must have the same length")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise ValueError("trajectory fields must be finite")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            k = int(np.argmax(np.diff(self.t) <= 0)) + 1
            raise ValueError(f"timestamps must be strictly increasing (pose {k})")
        if n and np.max(np.abs(np.linalg.norm(self.q, axis=1) - 1.0)) > QUAT_TOL:
            raise ValueError("quaternions must have unit norm")

    @classmethod
    def empty(cls, frame: str = "world") -> "Trajectory":
        return cls(np.empty(0), np.empty((0, 3)), np.empty((0, 4)), frame)

    @classmethod
    def from_poses(cls, poses, frame: str = "world") -> "Trajectory":
        poses = list(poses)
        if not poses:
            return cls.empty(frame)
        return cls([p.t for p in poses], [p.p for p in poses], [p.q for p in poses], frame)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k) -> PoseStamped:
        return PoseStamped(float(self.t[k]), self.p[k].copy(), self.q[k].copy())

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.p, axis=0), axis=1).sum())

    def transformed(self, T: RigidTransform, frame: str | None = None) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        q = quat_normalize(quat_multiply(matrix_to_quat(T.R), self.q))
        return Trajectory(self.t.copy(), T.apply(self.p), q, frame or self.frame)

    def copy(self) -> "Trajectory":
        return Trajectory(self.t.copy(), self.p.copy(), self.q.copy(), self.frame)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_tum(traj: Trajectory) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p, q in zip(traj.t.tolist(), traj.p.tolist(), traj.q.tolist()):
        lines.append(" ".join(_fmt(v) for v in (t, *p, *q)))
    return "\n".join(lines) + "\n"


def write_tum(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.write_text(format_tum(traj), encoding="ascii", newline="\n")
    return path


class TumReadResult(NamedTuple):
    trajectory: Trajectory
    renormalized: int


def parse_tum(text: str, source=None, frame: str = "world") -> TumReadResult:
    rows = []
    linenos = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.replace(",", " ").split()
        if len(fields) != 8:
            raise TrajectoryFormatError(f"expected 8 fields, found {len(fields)}", lineno, source)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise TrajectoryFormatError(f"non-numeric field in {body!r}", lineno, source) from None
        linenos.append(lineno)
    if not rows:
        return TumReadResult(Trajectory.empty(frame), 0)
    data = np.asarray(rows)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.all(np.isfinite(data), axis=1)))
        raise TrajectoryFormatError("non-finite value", linenos[bad], source)
    dt = np.diff(data[:, 0])
    if np.any(dt <= 0):
        bad = int(np.argmax(dt <= 0)) + 1
        raise TrajectoryFormatError("timestamps must be strictly increasing", linenos[bad], source)
    q = data[:, 4:8]
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        bad = int(np.argmax(norms == 0))
        raise TrajectoryFormatError("zero quaternion", linenos[bad], source)
    off = np.abs(norms - 1.0) > QUAT_TOL
    renormalized = int(off.sum())
    if renormalized:
        q = q.copy()
        q[off] /= norms[off, None]
        warnings.warn(
            f"{source or 'TUM input'}: renormalized {renormalized} quaternion(s)",
            RuntimeWarning,
            stacklevel=3,
        )
    return TumReadResult(Trajectory(data[:, 0], data[:, 1:4], q, frame), renormalized)


def read_tum(path, frame: str = "world") -> Trajectory:
    """Read a TUM trajectory (``t tx ty tz qx qy qz qw`` per line)."""
    path = Path(path)
    return parse_tum(path.read_text(encoding="utf-8"), source=path, frame=frame).trajectory
