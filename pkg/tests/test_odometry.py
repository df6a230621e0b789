import numpy as np
import pytest
from sklearn.base import clone

from roverbench.geometry import RigidTransform, so3_exp
from roverbench.odometry import (
    OdometryParams,
    PointToPlaneICP,
    VoxelDownsampler,
    estimate_normals,
    icp_point_to_plane,
    run_odometry,
    voxel_downsample,
)
from roverbench.validation import DegenerateGeometryError
from oracles import rotation_error, voxel_centroids


def corner_cloud(seed=0, n=1500):
    """Floor, two walls and a dome: enough structure to pin all six DOF."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-4, 4, (n, 2))
    floor = np.c_[u, np.zeros(n)]
    wall_x = np.c_[np.full(n, 4.0), u[:, 0], rng.uniform(0, 3, n)]
    wall_y = np.c_[u[:, 1], np.full(n, -4.0), rng.uniform(0, 3, n)]
    d = rng.normal(size=(n, 3))
    d[:, 2] = np.abs(d[:, 2])
    dome = d / np.linalg.norm(d, axis=1, keepdims=True) + [-1.5, 1.5, 0]
    return np.vstack([floor, wall_x, wall_y, dome])


def test_voxel_downsample_centroids():
    pts = np.array([[0.01, 0.01, 0.01], [0.09, 0.09, 0.09], [0.5, 0.5, 0.5]])
    out = voxel_downsample(pts, 0.2)
    np.testing.assert_allclose(out, [[0.05, 0.05, 0.05], [0.5, 0.5, 0.5]])
    assert voxel_downsample(np.empty((0, 3)), 0.2).shape == (0, 3)
    with pytest.raises(ValueError):
        voxel_downsample(pts, 0.0)


def test_voxel_downsample_one_point_per_voxel():
    pts = np.random.default_rng(0).uniform(-3, 3, (5000, 3))
    out = voxel_downsample(pts, 0.5)
    keys = np.floor(out / 0.5).astype(int)
    assert len(np.unique(keys, axis=0)) == len(out)
    assert len(out) == len(np.unique(np.floor(pts / 0.5).astype(int), axis=0))


def test_voxel_downsample_matches_hash_grid():
    pts = np.random.default_rng(3).uniform(-4, 4, (10_000, 3))
    out = voxel_downsample(pts, 0.5)
    ref = voxel_centroids(pts, 0.5)
    assert len(out) == len(ref)
    for c in out:
        np.testing.assert_allclose(c, ref[tuple(np.floor(c / 0.5).astype(int))], rtol=0, atol=1e-12)


def test_voxel_transformer_api():
    est = VoxelDownsampler(voxel=0.3)
    assert est.get_params() == {"voxel": 0.3}
    pts = np.random.default_rng(1).normal(size=(200, 3))
    np.testing.assert_array_equal(est.fit(pts).transform(pts), voxel_downsample(pts, 0.3))
    assert clone(est).set_params(voxel=0.1).voxel == 0.1


def test_normals_of_plane_face_sensor():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-3, 3, (500, 2)), np.full(500, -1.0)]
    n, ok = estimate_normals(pts, radius=1.0)
    assert ok.all()
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (500, 1)), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_icp_recovers_known_transform(seed):
    rng = np.random.default_rng(seed)
    target = corner_cloud(seed)
    truth = RigidTransform(so3_exp(rng.normal(size=3) * np.radians(3) / np.sqrt(3)), rng.uniform(-0.15, 0.15, 3))
    source = truth.inverse().apply(target)
    res = icp_point_to_plane(source, target, max_corr_dist=1.0)
    assert np.linalg.norm(res.transform.t - truth.t) < 1e-4
    assert rotation_error(res.transform.R, truth.R) < 1e-5
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert res.residual == res.history[-1]


def test_icp_history_non_increasing_with_noise():
    rng = np.random.default_rng(7)
    target = corner_cloud(3)
    truth = RigidTransform(so3_exp([0.02, -0.03, 0.08]), [0.3, -0.2, 0.05])
    source = truth.inverse().apply(target) + rng.normal(scale=0.02, size=target.shape)
    res = icp_point_to_plane(source, target, max_corr_dist=0.8)
    assert np.all(np.diff(res.history) <= 0)
    assert np.linalg.norm(res.transform.t - truth.t) < 0.02


def test_icp_on_plane_is_degenerate():
    rng = np.random.default_rng(0)
    plane = np.c_[rng.uniform(-5, 5, (800, 2)), np.zeros(800)]
    with pytest.raises(DegenerateGeometryError):
        icp_point_to_plane(plane + [0.1, 0, 0], plane)


def test_icp_without_overlap_is_degenerate():
    cloud = corner_cloud()
    with pytest.raises(DegenerateGeometryError):
        icp_point_to_plane(cloud + 100.0, cloud, max_corr_dist=0.5)


def test_icp_estimator_api():
    est = PointToPlaneICP(max_corr_dist=1.0)
    params = est.get_params()
    assert params["max_corr_dist"] == 1.0 and params["max_iter"] == 30
    target = corner_cloud(2)
    truth = RigidTransform(so3_exp([0, 0, 0.03]), [0.1, 0.05, 0])
    source = truth.inverse().apply(target)
    est.fit(source, target)
    np.testing.assert_allclose(est.transform(source), target, atol=1e-4)
    assert est.residual_ == est.residual_history_[-1]
    with pytest.raises(Exception):
        PointToPlaneICP().transform(source)


def moving_scans(n=12, step=0.1):
    world = corner_cloud(5, 2500)
    poses = [RigidTransform(so3_exp([0, 0, 0.01 * k]), [step * k, 0.02 * k, 0]) for k in range(n)]
    return [p.inverse().apply(world) for p in poses], poses


@pytest.mark.parametrize("map_frames", [0, 10])
def test_run_odometry_tracks_motion(map_frames):
    scans, poses = moving_scans()
    res = run_odometry(scans, np.arange(len(scans)) * 0.1, OdometryParams(voxel=0.1, map_frames=map_frames,
                                                                            max_corr_dist=1.0))
    assert res.degenerate_frames == []
    assert len(res.trajectory) == len(scans) and len(res.relative) == len(scans) - 1
    np.testing.assert_array_equal(res.trajectory.p[0], [0, 0, 0])
    err = np.linalg.norm(res.trajectory.p - np.array([p.t for p in poses]), axis=1)
    assert err.max() < 0.01


def test_run_odometry_flags_degenerate_frames():
    rng = np.random.default_rng(0)
    plane = np.c_[rng.uniform(-5, 5, (800, 2)), np.zeros(800)]
    res = run_odometry([plane, plane, plane], [0.0, 0.1, 0.2], OdometryParams(map_frames=0))
    assert res.degenerate_frames == [1, 2]
    assert np.all(np.isnan(res.residuals))
    np.testing.assert_allclose(res.trajectory.p, 0.0)


def test_run_odometry_input_checks():
    with pytest.raises(ValueError):
        run_odometry([corner_cloud()], [0.0])
    with pytest.raises(ValueError):
        run_odometry([corner_cloud()] * 2, [0.0])


def test_static_sensor_stays_at_identity():
    cloud = corner_cloud(4)
    res = run_odometry([cloud] * 5, np.arange(5) * 0.1)
    np.testing.assert_allclose(res.trajectory.p, 0.0, atol=1e-9)
    np.testing.assert_allclose(np.abs(res.trajectory.q[:, 3]), 1.0, atol=1e-9)
    np.testing.assert_array_equal(res.trajectory.t, np.arange(5) * 0.1)


def test_identity_registration_has_zero_residual():
    cloud = corner_cloud(1)
    res = icp_point_to_plane(cloud, cloud)
    assert res.residual < 1e-12
    np.testing.assert_allclose(res.transform.as_matrix(), np.eye(4), atol=1e-12)


def rocky_scene():
    from roverbench.terrain import Heightfield, RockPopulation, build_world

    hf = Heightfield(np.zeros((41, 41)), 0.5)
    scene, _ = build_world(hf, [RockPopulation(0.6, 0.2, 0.8), RockPopulation(0.02, 1.0, 2.0, seed=1)], 2)
    return scene


def test_small_translation_on_rocky_scan():
    from roverbench.geometry import quat_from_yaw
    from roverbench.sensorsim import LIDAR_PRESETS, simulate_lidar_scan
    from roverbench.trajectory import PoseStamped

    scan = simulate_lidar_scan(rocky_scene(), PoseStamped(0.0, np.array([10.0, 10.0, 1.0]), quat_from_yaw(0.0)),
                               LIDAR_PRESETS["vlp16"]).valid_points
    shift = np.array([0.05, 0.0, 0.02])
    res = icp_point_to_plane(scan, scan + shift)
    assert np.linalg.norm(res.transform.t - shift) < 1e-3


def one_metre_run(y, map_frames):
    from roverbench.geometry import quat_from_yaw
    from roverbench.sensorsim import LIDAR_PRESETS, simulate_lidar_scan
    from roverbench.trajectory import PoseStamped

    scene = rocky_scene()
    xs = 8.0 + 0.05 * np.arange(21)
    scans = [simulate_lidar_scan(scene, PoseStamped(0.0, np.array([x, y, 1.0]), quat_from_yaw(0.0)),
                                 LIDAR_PRESETS["default_360"]).valid_points for x in xs]
    res = run_odometry(scans, np.arange(21) * 0.05, OdometryParams(map_frames=map_frames))
    assert res.degenerate_frames == []
    return np.linalg.norm(res.trajectory.p[-1] - [1.0, 0.0, 0.0])


@pytest.mark.parametrize("y", [6.0, 10.0, 14.0])
def test_one_metre_run_over_rocks(y):
    assert one_metre_run(y, OdometryParams().map_frames) < 0.02 * 1.0


@pytest.mark.xfail(strict=True, reason="ring-pattern normals bias pure frame-to-frame ICP short by ~10% "
                                       "at 5 cm steps; the keyframe map is the default for this reason")
def test_one_metre_run_frame_to_frame():
    assert one_metre_run(10.0, 0) < 0.02 * 1.0


def test_voxel_finer_than_point_spacing_is_identity():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0.3, 0.7, 2.0]])
    out = voxel_downsample(pts, 0.1)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))
