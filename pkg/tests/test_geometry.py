import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polardepth.errors import BoundsError, ConfigurationError, DegenerateGeometryError, DimensionError
from polardepth.geometry import (
    CameraIntrinsics,
    DisparityMap,
    RigidPose,
    angle_between,
    backproject_angle,
    backproject_angle_analytic,
    electric_field,
    field_angles,
    fit_plane_normal,
    lift,
    local_normal,
    project_pixel,
    relative_pose,
    rotation_about,
    view_ray,
    warp_image,
)
from polardepth.polar import wrap_half_pi

K = CameraIntrinsics(50.0, 40.0, 10.0, 8.0, 21, 17)


def tilted_plane(a, z0=4.0, cam=K):
    """Disparity of the plane z = z0 + a*X (kappa = 1)."""
    u, _ = cam.pixel_grid()
    x = (u - cam.cx) / cam.fx
    return DisparityMap((1.0 - a * x) / z0)


# ---------------------------------------------------------------- camera types

def test_camera_validation():
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(0.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(1.0, 1.0, 4.0, 0.0, 4, 4)
    c = K.crop(5, 12, 4, 4)
    assert (c.cx, c.cy, c.shape) == (-2.0, 3.0, (4, 4))


def test_pose_validation_and_flat_round_trip():
    with pytest.raises(ConfigurationError):
        RigidPose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ConfigurationError):
        RigidPose(2 * np.eye(3))
    p = RigidPose(rotation_about([1, 2, 3], 0.7), [0.1, -0.2, 0.3])
    assert RigidPose.from_flat(p.flat()).flat() == p.flat()
    with pytest.raises(DimensionError):
        RigidPose.from_flat([0.0] * 11)


def test_relative_pose_maps_target_points_to_source():
    a = RigidPose(rotation_about([0, 1, 0], 0.2), [0.3, 0.0, 0.1])
    b = RigidPose(rotation_about([1, 0, 0], -0.1), [-0.2, 0.1, 0.0])
    X_world = np.array([0.4, -0.3, 5.0])
    rel = relative_pose(a, b)
    assert np.allclose(rel.apply(a.apply(X_world)), b.apply(X_world), atol=1e-12)


# ---------------------------------------------------------------- projection

def test_project_pixel_principal_and_45_degree_rays():
    cam = CameraIntrinsics(10.0, 10.0, 3.0, 2.0, 20, 8)
    d = DisparityMap(np.full((8, 20), 0.5))
    assert np.array_equal(project_pixel((3, 2), d, cam), [0.0, 0.0, 2.0])
    d1 = DisparityMap(np.ones((8, 20)))
    assert np.array_equal(project_pixel((13, 2), d1, cam), [1.0, 0.0, 1.0])


def test_project_pixel_matches_scalar_formula(rng):
    d = DisparityMap(rng.uniform(0.1, 2.0, K.shape), kappa=1.7)
    for _ in range(20):
        u, v = int(rng.integers(0, K.width)), int(rng.integers(0, K.height))
        z = 1.7 / d.values[v, u]
        expected = [(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z]
        assert np.array_equal(project_pixel((u, v), d, K), expected)


def test_project_pixel_errors():
    d = DisparityMap(np.ones(K.shape))
    with pytest.raises(BoundsError):
        project_pixel((K.width, 0), d, K)
    zero = np.ones(K.shape)
    zero[3, 4] = 0.0
    with pytest.raises(DegenerateGeometryError):
        project_pixel((4, 3), DisparityMap(zero), K)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_lift_then_project_is_identity(seed):
    r = np.random.default_rng(seed)
    d = DisparityMap(r.uniform(0.05, 5.0, K.shape), kappa=float(r.uniform(0.1, 3.0)))
    u, v = K.project(lift(d, K))
    uu, vv = K.pixel_grid()
    assert np.max(np.abs(u - uu)) < 1e-9 and np.max(np.abs(v - vv)) < 1e-9


# ---------------------------------------------------------------- normals and rays

def test_fronto_parallel_normal_for_any_kappa():
    for kappa in (0.1, 1.0, 37.0):
        d = DisparityMap(np.full(K.shape, 0.25), kappa=kappa)
        assert np.allclose(local_normal((5, 5), d, K), [0.0, 0.0, -1.0], atol=1e-12)


def test_tilted_plane_normal_closed_form():
    # z = z0 + a X has gradient (-a, 0, 1); the camera-facing orientation is (a, 0, -1).
    a = 0.5
    n = local_normal((12, 9), tilted_plane(a), K)
    expected = np.array([a, 0.0, -1.0]) / math.hypot(a, 1.0)
    assert np.max(np.abs(n - expected)) <= 1e-6
    assert angle_between(n, [-a, 0.0, 1.0]) <= 1e-6


def test_degenerate_triplet():
    d = DisparityMap(np.full(K.shape, 0.5))
    with pytest.raises(DegenerateGeometryError):
        local_normal((5, 5), d, K, neighbors=((6, 5), (7, 5)))


def test_view_ray_examples():
    cam = CameraIntrinsics(10.0, 10.0, 3.0, 2.0, 20, 8)
    assert np.allclose(view_ray((3, 2), cam), [0.0, 0.0, -1.0], atol=0)
    s = 1.0 / math.sqrt(2.0)
    assert np.allclose(view_ray((13, 2), cam), [-s, 0.0, -s], atol=1e-15)
    for q in ((0, 0), (19, 7), (7, 3)):
        assert abs(np.linalg.norm(view_ray(q, cam)) - 1.0) <= 1e-12


def test_electric_field_degenerate_on_principal_ray():
    cam = CameraIntrinsics(10.0, 10.0, 3.0, 2.0, 8, 6)
    d = DisparityMap(np.full((6, 8), 0.5))
    with pytest.raises(DegenerateGeometryError):
        electric_field((3, 2), d, cam)


def test_electric_field_orthogonal_on_tilted_plane_midline():
    d = tilted_plane(0.6)
    q = (14, int(K.cy))
    e = electric_field(q, d, K)
    n = local_normal(q, d, K)
    assert abs(np.dot(e, n)) <= 1e-9
    assert abs(np.dot(e, view_ray(q, K))) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_electric_field_orthogonality_property(seed):
    r = np.random.default_rng(seed)
    d = DisparityMap(r.uniform(0.2, 1.0, K.shape))
    q = (int(r.integers(0, K.width - 1)), int(r.integers(1, K.height)))
    try:
        e = electric_field(q, d, K)
    except DegenerateGeometryError:
        return
    assert abs(np.dot(e, local_normal(q, d, K))) <= 1e-9
    assert abs(np.dot(e, view_ray(q, K))) <= 1e-9
    assert abs(np.linalg.norm(e) - 1.0) <= 1e-12


# ---------------------------------------------------------------- back-projection

def test_backproject_reference_axis():
    cam = CameraIntrinsics(10.0, 10.0, 3.0, 2.0, 8, 6)
    Q = np.array([0.0, 0.0, 2.0])
    assert backproject_angle([0.0, 1.0, 0.0], Q, cam) == 0.0
    assert backproject_angle([1.0, 0.0, 0.0], Q, cam) == pytest.approx(-math.pi / 2, abs=1e-15)
    e = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    assert backproject_angle(e, Q, cam) == pytest.approx(math.pi / 4, abs=1e-12)


def test_backproject_line_of_sight_is_degenerate():
    Q = np.array([0.2, -0.1, 3.0])
    with pytest.raises(DegenerateGeometryError):
        backproject_angle(Q / np.linalg.norm(Q), Q, K)
    with pytest.raises(DegenerateGeometryError):
        backproject_angle([0, 1, 0], [0, 0, -1.0], K)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_backproject_finite_step_agrees_with_jacobian(seed):
    r = np.random.default_rng(seed)
    Q = np.array([r.uniform(-2, 2), r.uniform(-2, 2), r.uniform(0.5, 20)])
    E = r.standard_normal(3)
    E /= np.linalg.norm(E)
    ray = Q / np.linalg.norm(Q)
    if np.linalg.norm(np.cross(E, ray)) < 1e-3:
        return
    a = backproject_angle(E, Q, K)
    b = backproject_angle_analytic(E, Q, K)
    assert abs(wrap_half_pi(a - b)) <= 1e-6


def test_vectorized_field_angles_match_scalar_pipeline(rng):
    d = DisparityMap(rng.uniform(0.2, 0.3, K.shape))
    fa = field_angles(d, K)
    checked = 0
    for v in range(1, K.height):
        for u in range(K.width - 1):
            try:
                ref = backproject_angle(electric_field((u, v), d, K), project_pixel((u, v), d, K), K)
            except DegenerateGeometryError:
                assert not fa.scoreable[v, u]
                continue
            assert fa.scoreable[v, u]
            assert abs(wrap_half_pi(fa.angle[v, u] - ref)) <= 1e-9
            checked += 1
    assert checked > 0.9 * (K.height - 1) * (K.width - 1)
    assert not fa.scoreable[0].any() and not fa.scoreable[:, -1].any()


def test_field_angle_tangents_match_finite_differences(rng):
    d = DisparityMap(rng.uniform(0.2, 0.3, K.shape))
    fa = field_angles(d, K, with_tangents=True)
    v, u = 6, 9
    h = 1e-7
    for k, (dv, du) in enumerate(((-1, 0), (0, 0), (0, 1))):
        x = d.values.copy()
        x[v + dv, u + du] += h
        up = field_angles(d.with_values(x), K).angle[v, u]
        x[v + dv, u + du] -= 2 * h
        dn = field_angles(d.with_values(x), K).angle[v, u]
        assert fa.d_angle[k, v, u] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-6)


# ---------------------------------------------------------------- warping

def test_warp_identity_pose(rng):
    src = rng.random(K.shape)
    d = DisparityMap(rng.uniform(0.2, 1.0, K.shape))
    warped, valid = warp_image(src, d, RigidPose(), K)
    assert valid.all()
    assert np.array_equal(warped, src)


def test_warp_fronto_parallel_translation_is_uniform_shift():
    cam = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
    z, tx = 4.0, 0.1
    shift = cam.fx * tx / z  # 1 pixel
    u, v = cam.pixel_grid()
    src = np.sin(0.3 * u) + 0.1 * v
    d = DisparityMap(np.full(cam.shape, 1.0 / z))
    warped, valid = warp_image(src, d, RigidPose.from_translation(tx), cam)
    expected = np.sin(0.3 * (u + shift)) + 0.1 * v
    interior = valid & (u < cam.width - 2)
    # Shift is exactly one pixel, so sampling lands on grid points.
    assert np.max(np.abs(warped - expected)[interior]) <= 1e-6
    assert not valid[:, -1].any()


def test_warp_far_translation_invalidates_everything():
    d = DisparityMap(np.full(K.shape, 0.5))
    _, valid = warp_image(np.ones(K.shape), d, RigidPose.from_translation(100.0), K)
    assert not valid.any()


def test_warp_invalid_disparity_is_invalid():
    vals = np.full(K.shape, 0.5)
    vals[3, 3] = 0.0
    _, valid = warp_image(np.ones(K.shape), DisparityMap(vals), RigidPose(), K)
    assert not valid[3, 3] and valid.sum() == valid.size - 1


def test_plane_fit_recovers_tilted_normal():
    a = 0.4
    d = tilted_plane(a)
    n = fit_plane_normal(lift(d, K).reshape(-1, 3))
    # arccos near 1 resolves angles only to about sqrt(machine eps).
    assert angle_between(n, [a, 0.0, -1.0]) <= 1e-7
