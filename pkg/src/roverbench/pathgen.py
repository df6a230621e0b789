"""Scripted ground-truth rover paths and their simulator/TUM exports."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import quat_from_axis_angle, quat_from_yaw, quat_multiply, quat_normalize, quat_to_euler_zyx
from .terrain import Heightfield
from .trajectory import Trajectory


@dataclass
class PathSpec:
    """Piecewise-linear XY path driven at constant speed.

    ``turn_rate`` (deg/s) makes the rover spot-turn at each corner; with the
    default ``None`` the heading snaps to the next segment instantly.
    """

    waypoints: list = field(default_factory=list)
    closed: bool = False
    speed: float = 1.0
    sample_rate: float = 10.0
    height_offset: float = 1.0
    turn_rate: float | None = None

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        need = 3 if self.closed else 2
        if len(self.waypoints) < need:
            raise ValueError(f"{'closed' if self.closed else 'open'} path needs >= {need} waypoints")
        if not self.speed > 0 or not self.sample_rate > 0:
            raise ValueError("speed and sample_rate must be positive")
        if self.turn_rate is not None and not self.turn_rate > 0:
            raise ValueError("turn_rate must be positive")

    @property
    def vertices(self) -> np.ndarray:
        w = self.waypoints
        return np.vstack([w, w[:1]]) if self.closed else w

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())

    @property
    def spacing(self) -> float:
        return self.speed / self.sample_rate


def triangle_path(perimeter: float = 60.0, center=(0.0, 0.0), start_fraction: float = 0.5,
                  **kwargs) -> PathSpec:
    """Closed equilateral triangle whose start lies part-way along one side."""
    side = perimeter / 3.0
    R = side / math.sqrt(3.0)
    angles = np.deg2rad([90.0, 210.0, 330.0])
    corners = np.c_[np.cos(angles), np.sin(angles)] * R + np.asarray(center, dtype=float)
    start = corners[0] + start_fraction * (corners[1] - corners[0])
    waypoints = [start, corners[1], corners[2], corners[0]]
    return PathSpec(waypoints=waypoints, closed=True, **kwargs)


def _wrap(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


def sample_trajectory(path: PathSpec, hf: Heightfield) -> Trajectory:
    """Sample poses at ``sample_rate`` along the path over the terrain.

    Positions advance ``speed / sample_rate`` meters per sample; z follows
    the bilinear terrain height plus ``height_offset``; the heading follows
    the segment tangent with zero roll and pitch.
    """
    verts = path.vertices
    inside = hf.contains(verts[:, 0], verts[:, 1])
    if not np.all(inside):
        bad = int(np.argmin(inside))
        raise ValueError(f"waypoint {bad} {verts[bad].tolist()} lies outside the terrain")
    seg = np.diff(verts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 0
    starts, seg, seg_len = verts[:-1][keep], seg[keep], seg_len[keep]
    headings = np.arctan2(seg[:, 1], seg[:, 0])

    # timeline of phases: (kind, duration, start xy, direction/heading data)
    phases = []
    for k in range(len(seg)):
        if k > 0 and path.turn_rate is not None:
            turn = _wrap(headings[k] - headings[k - 1])
            duration = abs(math.degrees(turn)) / path.turn_rate
            if duration > 0:
                phases.append(("turn", duration, starts[k], headings[k - 1], turn))
        phases.append(("move", seg_len[k] / path.speed, starts[k], headings[k], seg[k] / seg_len[k]))
    bounds = np.concatenate([[0.0], np.cumsum([ph[1] for ph in phases])])
    total = bounds[-1]

    n = int(math.floor(total * path.sample_rate + 1e-9)) + 1
    t = np.arange(n) / path.sample_rate
    xy = np.empty((n, 2))
    yaw = np.empty(n)
    idx = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(phases) - 1)
    for k in range(n):
        kind, duration, origin, heading, extra = phases[idx[k]]
        local = t[k] - bounds[idx[k]]
        if kind == "move":
            xy[k] = origin + extra * (local * path.speed)
            yaw[k] = heading
        else:
            xy[k] = origin
            yaw[k] = heading + extra * min(local / duration, 1.0)
    z = hf.height_at(xy[:, 0], xy[:, 1]) + path.height_offset
    return Trajectory(t, np.c_[xy, z], quat_from_yaw(yaw), frame="world")


def perturb_orientations(traj: Trajectory, sigma_deg: float, seed: int = 0,
                         return_angles: bool = False):
    """Compose every orientation with a random rotation about a uniform axis.

    Angles are drawn from ``Normal(0, sigma_deg)``. Positions and timestamps
    are copied untouched.
    """
    if sigma_deg < 0:
        raise ValueError("sigma_deg must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(traj)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.normal(0.0, math.radians(sigma_deg), n)
    if sigma_deg == 0:
        q = traj.q.copy()
    else:
        q = quat_normalize(quat_multiply(traj.q, quat_from_axis_angle(axes, angles)))
    out = Trajectory(traj.t.copy(), traj.p.copy(), q, traj.frame)
    return (out, angles) if return_angles else out


def actor_sdf(traj: Trajectory, name: str = "rover") -> bytes:
    sdf = ET.Element("sdf", version="1.6")
    actor = ET.SubElement(sdf, "actor", name=name)
    script = ET.SubElement(actor, "script")
    ET.SubElement(script, "loop").text = "false"
    ET.SubElement(script, "auto_start").text = "true"
    trajectory = ET.SubElement(script, "trajectory", id="0", type="scripted")
    for pose in traj:
        wp = ET.SubElement(trajectory, "waypoint")
        ET.SubElement(wp, "time").text = repr(pose.t)
        roll, pitch, yaw = quat_to_euler_zyx(pose.q)
        fields = (*pose.p.tolist(), roll, pitch, yaw)
        ET.SubElement(wp, "pose").text = " ".join(repr(float(v) + 0.0) for v in fields)
    ET.indent(sdf, space="  ")
    return b'<?xml version="1.0"?>\n' + ET.tostring(sdf, encoding="utf-8") + b"\n"


def export_actor_sdf(traj: Trajectory, out, name: str = "rover") -> Path:
    """Write an SDF actor whose scripted trajectory has one waypoint per pose."""
    out = Path(out)
    out.write_bytes(actor_sdf(traj, name))
    return out


def read_actor_sdf(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, poses)`` with poses as ``x y z roll pitch yaw`` rows."""
    root = ET.parse(path).getroot()
    times, poses = [], []
    for wp in root.iter("waypoint"):
        times.append(float(wp.findtext("time")))
        poses.append([float(v) for v in wp.findtext("pose").split()])
    return np.asarray(times), np.asarray(poses).reshape(-1, 6)
