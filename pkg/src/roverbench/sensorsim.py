"""Ray-cast range sensing: LiDAR scans, depth/disparity frames and datasets.

Sensor frames are body frames: +X forward, +Y left, +Z up. The camera
looks along +X, so a pixel's depth is the forward component of its hit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import quat_to_matrix
from .ply import read_ply, write_ply
from .scene import Scene
from .trajectory import PoseStamped, Trajectory, read_tum, write_tum
from .validation import check_unit_vector

NOISE_TRUNCATION = 3.0


@dataclass(frozen=True)
class LidarModel:
    """Regular azimuth x elevation beam grid centered on the sensor's +X axis."""

    az_fov: float = 90.0
    el_fov: float = 30.0
    az_res: float = 0.2
    el_res: float = 0.4
    max_range: float = 100.0
    rate: float = 10.0
    range_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("az_fov", "el_fov", "az_res", "el_res", "max_range", "rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be non-negative")

    @property
    def n_azimuth(self) -> int:
        return max(1, round(self.az_fov / self.az_res))

    @property
    def n_elevation(self) -> int:
        return max(1, round(self.el_fov / self.el_res))

    @property
    def n_beams(self) -> int:
        return self.n_azimuth * self.n_elevation

    def beam_angles(self) -> tuple[np.ndarray, np.ndarray]:
        """Azimuth and elevation angles in degrees, each centered on zero."""
        az = (np.arange(self.n_azimuth) - (self.n_azimuth - 1) / 2) * self.az_res
        el = (np.arange(self.n_elevation) - (self.n_elevation - 1) / 2) * self.el_res
        return az, el

    def beam_directions(self) -> np.ndarray:
        """Unit directions, elevation-major, shape ``(n_elevation * n_azimuth, 3)``."""
        az, el = (np.deg2rad(a) for a in self.beam_angles())
        A, E = np.meshgrid(az, el, indexing="xy")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class StereoModel:
    width: int = 1280
    height: int = 720
    h_fov: float = 90.0
    v_fov: float = 60.0
    baseline: float = 0.12
    rate: float = 30.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")
        if not (0 < self.h_fov < 180 and 0 < self.v_fov < 180) or not self.rate > 0:
            raise ValueError("fields of view must lie in (0, 180) and rate must be positive")

    @property
    def fx(self) -> float:
        return self.width / (2.0 * math.tan(math.radians(self.h_fov) / 2.0))

    @property
    def fy(self) -> float:
        return self.height / (2.0 * math.tan(math.radians(self.v_fov) / 2.0))

    def pixel_rays(self) -> np.ndarray:
        """Un-normalized body-frame rays with unit forward component, ``(h, w, 3)``."""
        u = (np.arange(self.width) + 0.5 - self.width / 2.0) / self.fx
        v = (np.arange(self.height) + 0.5 - self.height / 2.0) / self.fy
        U, V = np.meshgrid(u, v, indexing="xy")
        return np.stack([np.ones_like(U), -U, -V], axis=-1)


LIDAR_PRESETS = {
    # 0.2 x 0.4 deg over 90 x 30 deg at 10 Hz
    "default": LidarModel(90.0, 30.0, 0.2, 0.4, 100.0, 10.0),
    "default_360": LidarModel(360.0, 30.0, 0.2, 0.4, 100.0, 10.0),
    "vlp16": LidarModel(360.0, 32.0, 0.2, 2.0, 100.0, 10.0),
    "os1_64": LidarModel(360.0, 33.28, 0.35, 0.52, 120.0, 10.0),
}

STEREO_PRESETS = {
    "default": StereoModel(1280, 720, 90.0, 60.0, 0.12, 30.0),
}


class RayHit(NamedTuple):
    distance: float
    triangle: int


class Scan(NamedTuple):
    stamp: float
    pose: PoseStamped
    points: np.ndarray
    valid: np.ndarray

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


class DepthFrame(NamedTuple):
    stamp: float
    pose: PoseStamped
    depth: np.ndarray
    disparity: np.ndarray
    fx: float
    baseline: float


def ray_cast(scene: Scene, origin, direction) -> RayHit | None:
    """Nearest hit with ray parameter > 1e-6 m, or ``None`` on a miss."""
    d = check_unit_vector(direction)
    dist, ids = scene.cast(np.asarray(origin, dtype=float).reshape(1, 3), d.reshape(1, 3))
    if ids[0] < 0:
        return None
    return RayHit(float(dist[0]), int(ids[0]))


def _beam_noise(model: LidarModel, n: int, frame_index: int) -> np.ndarray:
    if model.range_noise_sigma == 0:
        return np.zeros(n)
    # one generator per (seed, frame): the draw order is the beam order, whatever the scheduling
    rng = np.random.default_rng([model.seed, frame_index])
    z = np.clip(rng.standard_normal(n), -NOISE_TRUNCATION, NOISE_TRUNCATION)
    return z * model.range_noise_sigma


def simulate_lidar_scan(scene: Scene, pose: PoseStamped, model: LidarModel = LIDAR_PRESETS["default"],
                        frame_index: int = 0) -> Scan:
    """Cast the model's beam grid from ``pose``; returns sensor-frame points."""
    dirs = model.beam_directions()
    R = quat_to_matrix(pose.q)
    dist, _ = scene.cast(np.asarray(pose.p, dtype=float), dirs @ R.T)
    valid = dist <= model.max_range
    rng = dist + _beam_noise(model, len(dirs), frame_index)
    points = np.where(valid[:, None], dirs * np.where(valid, rng, 0.0)[:, None], np.nan)
    return Scan(float(pose.t), pose, points, valid)


def simulate_depth_frame(scene: Scene, pose: PoseStamped,
                         model: StereoModel = STEREO_PRESETS["default"]) -> DepthFrame:
    """Pinhole depth (forward distance) and disparity ``fx * baseline / depth``."""
    rays = model.pixel_rays()
    norms = np.linalg.norm(rays, axis=-1)
    dirs = (rays / norms[..., None]).reshape(-1, 3)
    R = quat_to_matrix(pose.q)
    dist, _ = scene.cast(np.asarray(pose.p, dtype=float), dirs @ R.T)
    depth = (dist / norms.reshape(-1)).reshape(model.height, model.width)
    hit = np.isfinite(depth)
    disparity = np.zeros_like(depth)
    disparity[hit] = model.fx * model.baseline / depth[hit]
    return DepthFrame(float(pose.t), pose, depth, disparity, model.fx, model.baseline)


def depth_from_disparity(disparity, fx: float, baseline: float) -> np.ndarray:
    disparity = np.asarray(disparity, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(disparity > 0, fx * baseline / np.where(disparity > 0, disparity, 1.0), np.inf)


def depth_points(frame: DepthFrame, model: StereoModel) -> np.ndarray:
    """Back-projected body-frame points of every hit pixel."""
    rays = model.pixel_rays()
    hit = np.isfinite(frame.depth)
    return rays[hit] * frame.depth[hit][:, None]


# -- datasets ----------------------------------------------------------------

def frame_schedule(traj: Trajectory, rate: float) -> np.ndarray:
    """Pose index emitting each frame; frames are ``1/rate`` apart from the first pose."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    n = int(math.floor(traj.duration * rate + 1e-9)) + 1
    times = traj.t[0] + np.arange(n) / rate
    right = np.clip(np.searchsorted(traj.t, times), 1, max(len(traj) - 1, 1))
    left = right - 1
    if len(traj) == 1:
        idx = np.zeros(n, dtype=int)
    else:
        idx = np.where(np.abs(traj.t[left] - times) <= np.abs(traj.t[right] - times), left, right)
    gap = np.abs(traj.t[idx] - times)
    if np.any(gap > 0.5 / rate + 1e-9):
        k = int(np.argmax(gap))
        raise ValueError(f"no pose within half a frame period of frame {k} (t={times[k]:.6f})")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("trajectory is sampled more coarsely than the sensor rate")
    return idx


def _frame_name(stamp: float) -> str:
    return f"{stamp:.6f}.ply"


def simulate_sequence(scene: Scene, traj: Trajectory, model, out_dir) -> dict:
    """Write one PLY per frame, the emitting poses as TUM, and a manifest."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    idx = frame_schedule(traj, model.rate)
    frames = []
    for k, i in enumerate(idx):
        pose = traj[int(i)]
        if isinstance(model, LidarModel):
            pts = simulate_lidar_scan(scene, pose, model, frame_index=k).valid_points
        else:
            frame = simulate_depth_frame(scene, pose, model)
            pts = depth_points(frame, model)
            np.save(out / "frames" / f"{pose.t:.6f}.disparity.npy", frame.disparity.astype(np.float32))
        name = _frame_name(pose.t)
        write_ply(pts, out / "frames" / name, comment=f"stamp {pose.t!r}")
        frames.append({"index": k, "stamp": pose.t, "file": f"frames/{name}", "points": int(len(pts))})
    gt = Trajectory(traj.t[idx], traj.p[idx], traj.q[idx], traj.frame)
    write_tum(gt, out / "ground_truth.tum")
    manifest = {
        "sensor": "lidar" if isinstance(model, LidarModel) else "stereo",
        "model": asdict(model),
        "frame_count": len(frames),
        "ground_truth": "ground_truth.tum",
        "frames": frames,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class Dataset(NamedTuple):
    stamps: np.ndarray
    scans: list
    ground_truth: Trajectory
    manifest: dict


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "dataset.json").read_text())
    frames = manifest["frames"]
    scans = [read_ply(root / f["file"]) for f in frames]
    stamps = np.array([f["stamp"] for f in frames], dtype=float)
    return Dataset(stamps, scans, read_tum(root / manifest["ground_truth"]), manifest)
