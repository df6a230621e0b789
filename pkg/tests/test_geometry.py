import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roverbench.geometry import (
    RigidTransform,
    euler_zyx_to_quat,
    matrix_to_quat,
    orthonormalize,
    quat_angle,
    quat_from_axis_angle,
    quat_from_yaw,
    quat_multiply,
    quat_to_euler_zyx,
    quat_to_matrix,
    rotation_angle,
    so3_exp,
)
from oracles import random_rotation, rotation_error

unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: np.asarray(v) / np.linalg.norm(v))


def test_quat_matrix_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        R = random_rotation(rng)
        assert rotation_error(R, quat_to_matrix(matrix_to_quat(R))) < 1e-12


def test_yaw_quaternion_rotates_x_axis():
    R = quat_to_matrix(quat_from_yaw(math.pi / 2))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=4), rng.normal(size=4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    np.testing.assert_allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b),
                               atol=1e-14)


@given(unit_quats)
@settings(max_examples=200, deadline=None)
def test_euler_roundtrip(q):
    back = euler_zyx_to_quat(*quat_to_euler_zyx(q))
    assert rotation_error(quat_to_matrix(q), quat_to_matrix(back)) < 1e-9


def test_euler_of_identity_is_zero():
    assert quat_to_euler_zyx([0, 0, 0, 1]) == pytest.approx((0.0, 0.0, 0.0), abs=0)


def test_axis_angle_and_angle():
    q = quat_from_axis_angle([0, 0, 1], 0.3)
    assert quat_angle(q) == pytest.approx(0.3, abs=1e-15)
    assert rotation_angle(quat_to_matrix(q)) == pytest.approx(0.3, abs=1e-15)


def test_rotation_angle_near_pi():
    R = quat_to_matrix(quat_from_axis_angle([1, 1, 0], math.pi - 1e-9))
    assert rotation_angle(R) == pytest.approx(math.pi - 1e-9, abs=1e-8)


def test_so3_exp_matches_axis_angle():
    w = np.array([0.1, -0.2, 0.3])
    theta = np.linalg.norm(w)
    np.testing.assert_allclose(so3_exp(w), quat_to_matrix(quat_from_axis_angle(w / theta, theta)), atol=1e-15)
    np.testing.assert_array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_orthonormalize_projects_onto_so3():
    rng = np.random.default_rng(2)
    R = random_rotation(rng) + 1e-6 * rng.normal(size=(3, 3))
    Q = orthonormalize(R)
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-14)
    assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-14)


def test_rigid_transform_algebra():
    rng = np.random.default_rng(3)
    A = RigidTransform(random_rotation(rng), rng.normal(size=3))
    B = RigidTransform(random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(A.compose(B).apply(x), A.apply(B.apply(x)), atol=1e-13)
    np.testing.assert_allclose(A.inverse().apply(A.apply(x)), x, atol=1e-13)
    np.testing.assert_allclose(A.as_matrix() @ np.r_[x[0], 1.0], np.r_[A.apply(x[0]), 1.0], atol=1e-13)
    assert A.is_valid()
    assert not RigidTransform(2 * np.eye(3), np.zeros(3)).is_valid()
