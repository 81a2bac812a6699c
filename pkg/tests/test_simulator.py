import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rendered
from polardepth import scenes
from polardepth.errors import ConfigurationError, DomainError
from polardepth.geometry import CameraIntrinsics, RigidPose, field_angles, relative_pose, warp_image
from polardepth.losses import photometric_error
from polardepth.polar import wrap_half_pi
from polardepth.simulator import (
    Material,
    Plane,
    Scene,
    Sphere,
    Texture,
    fresnel_dop,
    render_sequence,
    render_view,
)


def textbook_dop(theta, n):
    """Degree of polarization from the sine/tangent forms of the Fresnel amplitudes."""
    theta_t = math.asin(math.sin(theta) / n)
    rs = -math.sin(theta - theta_t) / math.sin(theta + theta_t)
    rp = math.tan(theta - theta_t) / math.tan(theta + theta_t)
    return (rs ** 2 - rp ** 2) / (rs ** 2 + rp ** 2)


# ---------------------------------------------------------------- Fresnel

def test_fresnel_normal_incidence_and_brewster():
    assert fresnel_dop(0.0) == pytest.approx(0.0, abs=1e-15)
    assert math.atan(1.5) == pytest.approx(0.9828, abs=1e-4)
    assert fresnel_dop(math.atan(1.5), 1.5) == pytest.approx(1.0, abs=1e-12)


def test_fresnel_matches_textbook_form():
    assert fresnel_dop(math.pi / 4, 1.5) == pytest.approx(textbook_dop(math.pi / 4, 1.5), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(theta=st.floats(1e-3, math.pi / 2 - 1e-3), n=st.floats(1.05, 3.0))
def test_fresnel_range_and_oracle(theta, n):
    r = fresnel_dop(theta, n)
    assert 0.0 <= r <= 1.0 + 1e-12
    assert r == pytest.approx(textbook_dop(theta, n), abs=1e-9)


def test_fresnel_domain():
    with pytest.raises(DomainError):
        fresnel_dop(math.pi / 2)
    with pytest.raises(DomainError):
        fresnel_dop(-0.1)
    with pytest.raises(DomainError):
        fresnel_dop(0.3, 1.0)


# ---------------------------------------------------------------- rendering

K = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


def test_flat_world_render():
    wall = Plane([0, 0, 5.0], [0, 0, -1.0], Material(kind="diffuse", texture=Texture("noise", 0.3, 4)))
    view = render_view(Scene([wall]), K)
    assert not view.sky_mask.any()
    assert np.allclose(view.depth_gt, 5.0, atol=1e-12)
    assert np.all(view.polar.rho == 0.05)
    assert not view.polar.confidence.any()


def test_empty_scene_is_all_sky():
    view = render_view(Scene([]), K)
    assert view.sky_mask.all()
    assert np.all(view.disparity_gt.values == 0)
    assert np.all(view.polar.rho == 0) and np.all(view.polar.iota == 0.7)


def test_tilted_specular_plane_forward_consistency():
    views, Kb = rendered("tilted-specular-plane", 64, 48)
    v = views[1]
    fa = field_angles(v.disparity_gt, Kb)
    m = v.polar.confidence & fa.scoreable
    assert m.sum() > 100
    assert np.max(np.abs(wrap_half_pi(fa.angle - v.polar.alpha))[m]) <= 1e-4


def test_diffuse_angle_is_rotated_quarter_turn():
    wall = Plane([0, 0, 5.0], scenes._tilted_normal(30.0, 10.0), Material(kind="diffuse"))
    glass = Plane([0, 0, 5.0], scenes._tilted_normal(30.0, 10.0), Material(kind="specular"))
    a = render_view(Scene([wall]), K).polar.alpha
    b = render_view(Scene([glass]), K).polar.alpha
    assert np.max(np.abs(np.sin(a - b - math.pi / 2))[1:, :-1]) <= 1e-9


def test_camera_inside_primitive():
    with pytest.raises(ConfigurationError):
        render_view(Scene([Sphere([0, 0, 0.5], 2.0)]), K)


def test_rho_bounds_and_diffuse_below_threshold():
    views, _ = rendered("sphere", 64, 48)
    v = views[1]
    assert np.all((v.polar.rho >= 0) & (v.polar.rho <= 1))
    assert np.all(v.polar.rho[~v.specular] < 0.4)


@pytest.mark.parametrize("name", sorted(scenes.BENCHMARKS))
def test_benchmark_invariants(name):
    views, _ = rendered(name, 48, 36)
    for v in views:
        assert np.array_equal(v.sky_mask, ~(np.isfinite(v.depth_gt) & (v.depth_gt > 0)))
        hit = ~v.sky_mask
        assert np.all(v.depth_gt[hit] > 0)
        n_dot_ray = np.sum(v.normals_gt * v.camera.rays(), -1)
        assert np.all(n_dot_ray[hit] < 0)
        assert np.all(v.polar.alpha >= -math.pi / 2) and np.all(v.polar.alpha < math.pi / 2)


def test_render_is_deterministic_and_thread_independent():
    scene, Kb, poses = scenes.street(48, 36)
    a = render_view(scene, Kb, poses[0], threads=1)
    b = render_view(scene, Kb, poses[0], threads=1)
    c = render_view(scene, Kb, poses[0], threads=4)
    for x in (b, c):
        for name in ("iota", "alpha", "rho", "confidence"):
            assert np.array_equal(getattr(a.polar, name), getattr(x.polar, name))
        assert np.array_equal(a.depth_gt, x.depth_gt)


# ---------------------------------------------------------------- sequences

def test_sequence_needs_two_poses():
    with pytest.raises(ConfigurationError):
        render_sequence(Scene([]), K, [RigidPose()])


def test_identical_poses_give_identical_views():
    scene, Kb, _ = scenes.textured_diffuse(32, 24)
    a, b = render_sequence(scene, Kb, [RigidPose(), RigidPose()])
    assert np.array_equal(a.polar.iota, b.polar.iota)


def test_lateral_translation_is_uniform_shift():
    wall = Plane([0, 0, 4.0], [0, 0, -1.0],
                 Material(kind="diffuse", texture=Texture("noise", 0.5, 9, 1.0)))
    # Camera moves +0.1 m in x: the image content shifts left by fx*t/z = 1 pixel.
    a, b = render_sequence(Scene([wall]), K, [RigidPose(), RigidPose.from_translation(-0.1)])
    assert np.max(np.abs(b.polar.iota[:, :-1] - a.polar.iota[:, 1:])) <= 1e-6


def test_warp_with_ground_truth_reproduces_neighbor_view():
    # Default resolution: at 64x48 the texture is close to aliasing and bilinear
    # resampling alone costs about 1.6e-3.
    views, Kb = rendered("textured-diffuse")
    t, s = views[1], views[2]
    warped, valid = warp_image(s.polar.iota, t.disparity_gt, relative_pose(t.pose, s.pose), Kb)
    pe = photometric_error(t.polar.iota, warped)
    inner = valid.copy()
    inner[[0, -1], :] = False
    inner[:, [0, -1]] = False
    assert pe[inner].mean() <= 1e-3
