"""Reference LiDAR odometry: voxel downsampling and point-to-plane ICP."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import RigidTransform, orthonormalize, rotation_angle, so3_exp
from .trajectory import Trajectory
from .validation import DegenerateGeometryError, check_points, check_positive

log = logging.getLogger(__name__)

MAX_CONDITION = 1e8
MAX_HALVINGS = 6


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    Output rows are ordered by voxel index (lexicographic in x, y, z).
    """
    voxel = check_positive(voxel, "voxel")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :func:`voxel_downsample`."""

    def __init__(self, voxel: float = 0.2):
        self.voxel = voxel

    def fit(self, X, y=None):
        check_positive(self.voxel, "voxel")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        return voxel_downsample(check_points(X, min_points=0), self.voxel)


def estimate_normals(points, radius: float = 1.0, k: int = 10, min_neighbors: int = 5,
                     tree: cKDTree | None = None):
    """PCA normals from up to ``k`` neighbours within ``radius``.

    Returns ``(normals, ok)``; ``ok`` is False where fewer than
    ``min_neighbors`` neighbours (the point included) were found. Normals are
    oriented towards the frame origin, i.e. the sensor.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree = tree if tree is not None else cKDTree(pts)
    k_eff = min(k, len(pts))
    dist, idx = tree.query(pts, k=k_eff, distance_upper_bound=radius)
    dist = dist.reshape(len(pts), k_eff)
    idx = idx.reshape(len(pts), k_eff)
    found = np.isfinite(dist)
    count = found.sum(axis=1)
    ok = count >= min_neighbors
    safe = np.where(found, idx, np.arange(len(pts))[:, None])
    nb = pts[safe]
    w = found[..., None].astype(float)
    mean = (nb * w).sum(axis=1) / np.maximum(count, 1)[:, None]
    centered = (nb - mean[:, None, :]) * w
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", normals, pts) > 0
    normals[flip] *= -1.0
    return normals, ok


class ICPResult(NamedTuple):
    transform: RigidTransform
    residual: float
    n_iter: int
    history: list


def icp_point_to_plane(source, target, init: RigidTransform | None = None, max_iter: int = 30,
                       tol: float = 1e-6, max_corr_dist: float = 1.0, *, target_normals=None,
                       normal_radius: float = 1.0, min_neighbors: int = 5) -> ICPResult:
    """Register ``source`` onto ``target`` by linearized point-to-plane ICP.

    The returned transform maps source coordinates into the target frame.
    A step that raises the point-to-plane RMS is halved until it does not;
    if that fails the loop ends, so ``history`` is non-increasing.

    Raises
    ------
    DegenerateGeometryError
        If the 6x6 normal system has condition number above 1e8 (for
        instance when both clouds lie on one plane) or too few
        correspondences survive.
    """
    src = check_points(source, min_points=10, name="source")
    tgt = check_points(target, min_points=10, name="target")
    if target_normals is None:
        normals, ok = estimate_normals(tgt, normal_radius, min_neighbors=min_neighbors)
    else:
        normals, ok = target_normals
    tgt, normals = tgt[ok], normals[ok]
    if len(tgt) < 10:
        raise DegenerateGeometryError("target normals could not be estimated")
    tree = cKDTree(tgt)

    def residuals(T):
        moved = T.apply(src)
        d, j = tree.query(moved, distance_upper_bound=max_corr_dist)
        m = np.isfinite(d)
        if m.sum() < 6:
            return None
        p, q, n = moved[m], tgt[j[m]], normals[j[m]]
        r = np.einsum("ij,ij->i", p - q, n)
        return p, n, r, float(np.sqrt(np.mean(r * r)))

    T = init if init is not None else RigidTransform.identity()
    cur = residuals(T)
    if cur is None:
        raise DegenerateGeometryError(f"fewer than 6 correspondences within {max_corr_dist} m")
    history = [cur[3]]
    n_iter = 0
    for _ in range(max_iter):
        p, n, r, rms = cur
        A = np.hstack([np.cross(p, n), n])
        H = A.T @ A
        cond = np.linalg.cond(H)
        if not cond <= MAX_CONDITION:
            raise DegenerateGeometryError(
                f"point-to-plane system is unconstrained (condition number {cond:.3g})"
            )
        x = np.linalg.solve(H, -A.T @ r)
        # backtrack along the step until the residual stops growing
        for _ in range(MAX_HALVINGS + 1):
            step = RigidTransform(orthonormalize(so3_exp(x[:3])), x[3:])
            cand = step.compose(T)
            cand = RigidTransform(orthonormalize(cand.R), cand.t)
            nxt = residuals(cand)
            if nxt is not None and nxt[3] <= rms:
                break
            x = 0.5 * x
        else:
            break
        T, cur = cand, nxt
        history.append(cur[3])
        n_iter += 1
        if np.linalg.norm(x) < tol:
            break
    best = T
    return ICPResult(best, history[-1], n_iter, history)


class PointToPlaneICP(BaseEstimator):
    """Estimator form of :func:`icp_point_to_plane`.

    ``fit(source, target)`` stores ``transform_`` (source -> target frame),
    ``residual_`` and ``residual_history_``; ``transform`` applies it.
    """

    def __init__(self, max_iter: int = 30, tol: float = 1e-6, max_corr_dist: float = 1.0,
                 normal_radius: float = 1.0, min_neighbors: int = 5):
        self.max_iter = max_iter
        self.tol = tol
        self.max_corr_dist = max_corr_dist
        self.normal_radius = normal_radius
        self.min_neighbors = min_neighbors

    def fit(self, source, target, init: RigidTransform | None = None):
        res = icp_point_to_plane(
            source, target, init, self.max_iter, self.tol, self.max_corr_dist,
            normal_radius=self.normal_radius, min_neighbors=self.min_neighbors,
        )
        self.transform_ = res.transform
        self.residual_ = res.residual
        self.residual_history_ = res.history
        self.n_iter_ = res.n_iter
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_points(X, min_points=0))


@dataclass
class OdometryParams:
    """ICP settings; ``map_frames=0`` registers every scan against the previous one.

    With ``map_frames > 0`` the target is a local map: the last
    ``map_frames`` keyframe scans in odometry coordinates, voxelized at
    ``map_voxel``. A scan becomes a keyframe once the sensor has moved
    ``keyframe_dist`` metres or turned ``keyframe_angle`` degrees since the
    last one.
    """

    voxel: float = 0.2
    max_corr_dist: float = 0.5
    max_iter: int = 30
    tol: float = 1e-6
    normal_radius: float = 1.0
    min_neighbors: int = 5
    map_frames: int = 10
    map_voxel: float = 0.1
    keyframe_dist: float = 0.3
    keyframe_angle: float = 3.0


@dataclass
class OdometryResult:
    trajectory: Trajectory
    relative: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    degenerate_frames: list = field(default_factory=list)


class _LocalMap:
    def __init__(self, params: OdometryParams):
        self.params = params
        self.frames: deque = deque(maxlen=max(params.map_frames, 1))
        self.anchor = RigidTransform.identity()
        # coordinates of ``points``: the previous scan's frame, or odometry frame for a map
        self.frame = RigidTransform.identity()

    def add(self, cloud, pose: RigidTransform):
        p = self.params
        self.anchor = pose
        if p.map_frames == 0:
            self.points = cloud
            self.frame = pose
        else:
            self.frames.append(pose.apply(cloud))
            self.points = voxel_downsample(np.vstack(self.frames), p.map_voxel)
        self.normals = estimate_normals(self.points, p.normal_radius, min_neighbors=p.min_neighbors)

    def wants(self, pose: RigidTransform) -> bool:
        if self.params.map_frames == 0:
            return True
        d = self.anchor.inverse().compose(pose)
        return bool(np.linalg.norm(d.t) > self.params.keyframe_dist
                    or np.degrees(rotation_angle(d.R)) > self.params.keyframe_angle)


def run_odometry(scans: Sequence[np.ndarray], stamps, params: OdometryParams | None = None) -> OdometryResult:
    """Chain ICP registrations into a trajectory starting at the identity.

    Each registration starts from the previous relative motion (constant
    velocity). A frame whose registration is degenerate keeps that guess and
    is listed in ``degenerate_frames``.
    """
    params = params or OdometryParams()
    stamps = np.asarray(stamps, dtype=float)
    if len(scans) < 2 or len(scans) != len(stamps):
        raise ValueError("need at least two scans, one stamp per scan")
    clouds = [voxel_downsample(s, params.voxel) for s in scans]

    pose = RigidTransform.identity()
    rel = RigidTransform.identity()
    positions = [pose.t.copy()]
    quats = [pose.quat]
    result = OdometryResult(Trajectory.empty("odom"))
    local = _LocalMap(params)
    local.add(clouds[0], pose)
    for k in range(1, len(clouds)):
        guess = pose.compose(rel)
        try:
            res = icp_point_to_plane(
                clouds[k], local.points, local.frame.inverse().compose(guess), params.max_iter,
                params.tol, params.max_corr_dist, target_normals=local.normals,
                min_neighbors=params.min_neighbors,
            )
            new = local.frame.compose(res.transform)
            result.residuals.append(res.residual)
        except (DegenerateGeometryError, ValueError) as exc:
            log.warning("frame %d: registration skipped (%s)", k, exc)
            result.degenerate_frames.append(k)
            result.residuals.append(float("nan"))
            new = guess
        new = RigidTransform(orthonormalize(new.R), new.t)
        rel = pose.inverse().compose(new)
        pose = new
        result.relative.append(rel)
        positions.append(pose.t.copy())
        quats.append(pose.quat)
        if local.wants(pose):
            local.add(clouds[k], pose)
    result.trajectory = Trajectory(stamps, np.array(positions), np.array(quats), "odom")
    return result
