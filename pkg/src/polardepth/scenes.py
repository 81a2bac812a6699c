"""Named benchmark scenes.

Each builder returns ``(scene, camera, poses)``; poses are world-to-camera
transforms of a short lateral camera track whose middle view is the target.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError
from .geometry import (CameraIntrinsics, DisparityMap, RigidPose, angle_between, fit_plane_normal,
                       lift, rotation_about)
from .simulator import Material, Plane, Scene, Sphere, Texture


def camera(width: int = 128, height: int = 96, fov_scale: float = 0.8) -> CameraIntrinsics:
    f = fov_scale * width
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def lateral_track(baseline: float = 0.1, n: int = 3) -> list[RigidPose]:
    """Camera centers spaced ``baseline`` meters apart along x, centered at 0."""
    offsets = (np.arange(n) - (n - 1) / 2.0) * baseline
    return [RigidPose.from_translation(-x, 0.0, 0.0) for x in offsets]


def _tilted_normal(yaw_deg: float, pitch_deg: float = 0.0) -> np.ndarray:
    """Camera-facing normal rotated by yaw about y then pitch about x."""
    n = np.array([0.0, 0.0, -1.0])
    n = rotation_about([0, 1, 0], np.deg2rad(yaw_deg)) @ n
    return rotation_about([1, 0, 0], np.deg2rad(pitch_deg)) @ n


GLASS = Material(kind="specular", albedo=0.5, texture=Texture("checker", period=0.8, contrast=0.3))
BRICK = Material(kind="diffuse", albedo=0.8, texture=Texture("noise", period=0.25, seed=3))
ASPHALT = Material(kind="diffuse", albedo=0.6, texture=Texture("noise", period=0.3, seed=11))


def specular_wall(width=128, height=96):
    wall = Plane([0.0, 0.0, 6.0], _tilted_normal(50.0), GLASS)
    return Scene([wall]), camera(width, height), lateral_track(0.1)


def tilted_specular_plane(width=128, height=96):
    backdrop = Plane([0.0, 0.0, 9.0], [0.0, 0.0, -1.0], BRICK)
    glass = Plane([0.2, 0.1, 4.0], _tilted_normal(35.0, -40.0), GLASS, extent=(1.4, 1.0))
    return Scene([backdrop, glass]), camera(width, height), lateral_track(0.1)


def specular_sphere(width=128, height=96):
    backdrop = Plane([0.0, 0.0, 8.0], [0.0, 0.0, -1.0], BRICK)
    ball = Sphere([0.3, 0.0, 4.0], 1.3,
                  Material(kind="specular", albedo=0.6, texture=Texture("noise", period=0.3, seed=5)))
    return Scene([backdrop, ball]), camera(width, height), lateral_track(0.1)


def street(width=128, height=96):
    ground = Plane([0.0, 1.5, 0.0], [0.0, -1.0, 0.0], ASPHALT)
    left = Plane([-3.0, 0.0, 0.0], [1.0, 0.0, 0.0], BRICK, extent=(40.0, 6.0),
                 u_axis=[0.0, 0.0, 1.0])
    right = Plane([3.5, 0.0, 0.0], [-1.0, 0.0, 0.0], GLASS, extent=(40.0, 6.0),
                  u_axis=[0.0, 0.0, 1.0])
    windshield = Plane([0.3, 0.6, 6.0], _tilted_normal(10.0, -55.0), GLASS, extent=(0.8, 0.4))
    return Scene([ground, left, right, windshield]), camera(width, height), lateral_track(0.1)


def all_sky(width=128, height=96):
    return Scene([]), camera(width, height), lateral_track(0.1)


def textured_diffuse(width=128, height=96):
    """Smooth full-contrast texture and a wider baseline: well-posed photometric matching."""
    wall = Plane([0.0, 0.0, 5.0], _tilted_normal(20.0, 10.0),
                 Material(kind="diffuse", albedo=0.9,
                          texture=Texture("noise", period=0.8, seed=21, contrast=1.0)))
    return Scene([wall]), camera(width, height), lateral_track(0.3)


def specular_plane(width=64, height=48):
    """Untextured glass plane filling the frame: photometrically featureless."""
    glass = Plane([0.0, 0.0, 5.0], _tilted_normal(45.0, 20.0),
                  Material(kind="specular", albedo=0.6, highlight=0.0))
    # Narrower field of view keeps depth within 3.5-8.5 m and rho above threshold.
    return Scene([glass]), camera(width, height, fov_scale=1.6), lateral_track(0.1)


def plane_normal_error(disp: DisparityMap, K: CameraIntrinsics, reference) -> float:
    """Angle in degrees between the plane fitted to ``disp`` and ``reference``."""
    return float(np.degrees(angle_between(fit_plane_normal(lift(disp, K)[disp.valid]), reference)))


def bent_plane_init(gt: DisparityMap, K: CameraIntrinsics, rng: np.random.Generator,
                    target_deg: float = 8.0, spread_deg: float = 20.0) -> DisparityMap:
    """Fold a planar disparity map along a crease so the fitted normal is off by ``target_deg``.

    The half-plane beyond the crease gains a linear disparity ramp. The crease
    runs roughly along the disparity gradient (within ``spread_deg``), so the
    bend rotates the gradient direction. A ramp along the gradient would only
    change its magnitude, which the angle-of-polarization cue cannot see.
    """
    h, w = gt.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    gy, gx = np.gradient(gt.values)
    phi = np.arctan2(gy[gt.valid].mean(), gx[gt.valid].mean())
    theta = (phi + np.pi / 2 + np.radians(rng.uniform(-spread_deg, spread_deg))
             + np.pi * rng.integers(0, 2))
    cu, cv = rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h
    ramp = np.maximum((uu - cu) * np.cos(theta) + (vv - cv) * np.sin(theta), 0.0) / w
    ramp *= float(gt.values[gt.valid].mean())
    reference = fit_plane_normal(lift(gt, K)[gt.valid])

    def excess(amp):
        return plane_normal_error(gt.with_values(gt.values + amp * ramp), K, reference) - target_deg

    amp = brentq(excess, 0.0, 2.0, xtol=1e-12)
    return gt.with_values(gt.values + amp * ramp)


BENCHMARKS = {
    "specular-wall": specular_wall,
    "tilted-specular-plane": tilted_specular_plane,
    "sphere": specular_sphere,
    "street": street,
    "all-sky": all_sky,
    "textured-diffuse": textured_diffuse,
    "specular-plane": specular_plane,
}

FORWARD_CONSISTENCY_SCENES = ("specular-wall", "tilted-specular-plane", "sphere", "street", "all-sky")


def benchmark(name: str, width: int | None = None, height: int | None = None):
    try:
        builder = BENCHMARKS[name]
    except KeyError:
        raise ConfigurationError(f"unknown benchmark scene {name!r}; choose from {sorted(BENCHMARKS)}")
    kwargs = {}
    if width is not None:
        kwargs["width"] = width
    if height is not None:
        kwargs["height"] = height
    return builder(**kwargs)
