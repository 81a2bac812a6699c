"""Ray-cast synthetic scenes into polarimetric views with exact ground truth.

Rendered angles of polarization come from the same pixel-triplet E-field
construction the loss uses, evaluated on the ground-truth geometry, so the
polarimetric term vanishes at the true disparity by construction.  Degrees
of polarization follow the Fresnel reflectance ratio.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .geometry import CameraIntrinsics, DisparityMap, RigidPose, field_angles
from .polar import PolarImage, wrap_half_pi

SKY_INTENSITY = 0.7


@dataclass(frozen=True)
class Texture:
    """Procedural albedo modulation in [0, 1].

    ``kind`` is ``"none"``, ``"checker"`` (``period`` in meters) or
    ``"noise"`` (value noise with lattice spacing ``period`` and ``seed``).
    """

    kind: str = "none"
    period: float = 0.5
    seed: int = 0
    contrast: float = 0.7

    def __post_init__(self):
        if self.kind not in ("none", "checker", "noise"):
            raise ConfigurationError(f"unknown texture kind {self.kind!r}")
        if not self.period > 0 or not 0 <= self.contrast <= 1:
            raise ConfigurationError("texture period must be positive and contrast in [0, 1]")

    def evaluate(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.ones_like(s)
        if self.kind == "checker":
            parity = (np.floor(s / self.period) + np.floor(t / self.period)) % 2
            value = parity
        else:
            value = 0.6 * _value_noise(s / self.period, t / self.period, self.seed)
            value += 0.4 * _value_noise(2.3 * s / self.period, 2.3 * t / self.period, self.seed + 7919)
        return 1.0 - self.contrast + self.contrast * value


_LATTICE = 64


def _value_noise(x, y, seed):
    lattice = np.random.default_rng(seed).random((_LATTICE, _LATTICE))
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    # Smoothstep keeps the texture C1 so warped images stay differentiable.
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    i0 = x0.astype(np.int64) % _LATTICE
    j0 = y0.astype(np.int64) % _LATTICE
    i1 = (i0 + 1) % _LATTICE
    j1 = (j0 + 1) % _LATTICE
    top = lattice[j0, i0] * (1 - sx) + lattice[j0, i1] * sx
    bottom = lattice[j1, i0] * (1 - sx) + lattice[j1, i1] * sx
    return top * (1 - sy) + bottom * sy


@dataclass(frozen=True)
class Material:
    kind: str = "diffuse"
    albedo: float = 0.7
    texture: Texture = field(default_factory=Texture)
    refractive_index: float = 1.5
    rho_diffuse: float = 0.05
    highlight: float = 0.15
    shininess: float = 40.0

    def __post_init__(self):
        if self.kind not in ("diffuse", "specular"):
            raise ConfigurationError(f"unknown material kind {self.kind!r}")
        if not self.refractive_index > 1:
            raise ConfigurationError("refractive index must exceed 1")
        if not 0 <= self.rho_diffuse < 0.4:
            raise ConfigurationError("rho_diffuse must stay below the specular threshold")
        if not 0 <= self.albedo <= 1:
            raise ConfigurationError("albedo must lie in [0, 1]")


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ConfigurationError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    material: Material = field(default_factory=Material)
    extent: tuple[float, float] | None = None
    u_axis: np.ndarray | None = None

    def __post_init__(self):
        n = _unit(self.normal)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        ua = self.u_axis
        if ua is None:
            helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
            ua = np.cross(helper, n)
        ua = np.asarray(ua, dtype=float)
        ua = _unit(ua - np.dot(ua, n) * n)
        object.__setattr__(self, "u_axis", ua)
        if self.extent is not None:
            ext = tuple(float(e) for e in self.extent)
            if len(ext) != 2 or min(ext) <= 0:
                raise ConfigurationError("plane extent must be two positive half-sizes")
            object.__setattr__(self, "extent", ext)

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.dot(self.point - origin, self.normal) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9)
        x = origin + t[..., None] * dirs
        rel = x - self.point
        s = rel @ self.u_axis
        r = rel @ self.v_axis
        if self.extent is not None:
            hit &= (np.abs(s) <= self.extent[0]) & (np.abs(r) <= self.extent[1])
        normals = np.broadcast_to(self.normal, dirs.shape)
        return np.where(hit, t, np.inf), normals, s, r

    def contains(self, point) -> bool:
        return False


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ConfigurationError("sphere radius must be positive")

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = float(oc @ oc) - self.radius ** 2
        a = np.sum(dirs * dirs, -1)
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / a
        t2 = (-b + sq) / a
        t = np.where(t1 > 1e-9, t1, t2)
        hit = ok & (t > 1e-9)
        x = origin + np.where(hit, t, 0.0)[..., None] * dirs
        normals = (x - self.center) / self.radius
        lon = np.arctan2(normals[..., 0], normals[..., 2]) * self.radius
        lat = np.arcsin(np.clip(normals[..., 1], -1, 1)) * self.radius
        return np.where(hit, t, np.inf), normals, lon, lat

    def contains(self, point) -> bool:
        return float(np.linalg.norm(np.asarray(point) - self.center)) < self.radius


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    light: np.ndarray = field(default_factory=lambda: np.array([-0.3, -1.0, -0.8]))
    ambient: float = 0.3
    sky_intensity: float = SKY_INTENSITY

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "light", _unit(self.light))


@dataclass
class RenderedView:
    polar: PolarImage
    depth_gt: np.ndarray
    disparity_gt: DisparityMap
    normals_gt: np.ndarray
    sky_mask: np.ndarray
    camera: CameraIntrinsics
    pose: RigidPose
    primitive_id: np.ndarray
    specular: np.ndarray


def fresnel_dop(theta_i, n: float = 1.5):
    """Degree of linear polarization of specular reflection."""
    theta = np.asarray(theta_i, dtype=float)
    if np.any(theta < 0) or np.any(theta >= np.pi / 2):
        raise DomainError("incidence angle must lie in [0, pi/2)")
    if not n > 1:
        raise DomainError("refractive index must exceed 1")
    cos_i = np.cos(theta)
    sin_t = np.sin(theta) / n
    cos_t = np.sqrt(1.0 - sin_t ** 2)
    rs = (cos_i - n * cos_t) / (cos_i + n * cos_t)
    rp = (n * cos_i - cos_t) / (n * cos_i + cos_t)
    R_s, R_p = rs ** 2, rp ** 2
    out = (R_s - R_p) / (R_s + R_p)
    return float(out) if out.ndim == 0 else out


def _cast(scene: Scene, origin, dirs):
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    prim = np.full(shape, -1)
    normals = np.zeros(shape + (3,))
    tex_s = np.zeros(shape)
    tex_t = np.zeros(shape)
    for i, p in enumerate(scene.primitives):
        t, n, s, r = p.intersect(origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        prim = np.where(closer, i, prim)
        normals = np.where(closer[..., None], n, normals)
        tex_s = np.where(closer, s, tex_s)
        tex_t = np.where(closer, r, tex_t)
    return t_best, prim, normals, tex_s, tex_t


def render_view(scene: Scene, K: CameraIntrinsics, pose: RigidPose = RigidPose(),
                kappa: float = 1.0, threads: int = 1) -> RenderedView:
    """Ray-cast ``scene`` through a camera with world-to-camera ``pose``."""
    center = -pose.rotation.T @ pose.translation
    for p in scene.primitives:
        if p.contains(center):
            raise ConfigurationError("camera center lies inside a primitive")
    h, w = K.shape
    rays_cam = K.rays()
    rt = pose.rotation.T
    dirs_world = np.stack([rt[i, 0] * rays_cam[..., 0] + rt[i, 1] * rays_cam[..., 1]
                           + rt[i, 2] * rays_cam[..., 2] for i in range(3)], -1)

    # Rows are independent; tiling only changes which thread computes them.
    bounds = np.linspace(0, h, max(1, min(threads, h)) + 1).astype(int)
    chunks = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            parts = list(ex.map(lambda ab: _cast(scene, center, dirs_world[ab[0]:ab[1]]), chunks))
    else:
        parts = [_cast(scene, center, dirs_world)]
    t_hit, prim, n_world, tex_s, tex_t = (np.concatenate(x) for x in zip(*parts))

    sky = prim < 0
    # Ray parameter t with camera-frame rays of unit z is exactly the depth.
    depth = np.where(sky, np.inf, t_hit)
    to_cam_world = -dirs_world / np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    flip = np.sum(n_world * to_cam_world, -1) < 0
    n_world = np.where(flip[..., None], -n_world, n_world)
    n_world = np.where(sky[..., None], 0.0, n_world)
    r = pose.rotation
    n_cam = np.stack([r[i, 0] * n_world[..., 0] + r[i, 1] * n_world[..., 1]
                      + r[i, 2] * n_world[..., 2] for i in range(3)], -1)

    iota = np.full((h, w), scene.sky_intensity)
    rho = np.zeros((h, w))
    specular = np.zeros((h, w), bool)
    half = to_cam_world + scene.light
    half /= np.linalg.norm(half, axis=-1, keepdims=True)
    cos_inc = np.clip(np.sum(n_world * to_cam_world, -1), 0.0, 1.0)
    theta = np.arccos(cos_inc)
    for i, p in enumerate(scene.primitives):
        sel = prim == i
        if not sel.any():
            continue
        mat = p.material
        albedo = mat.albedo * mat.texture.evaluate(tex_s[sel], tex_t[sel])
        lam = np.maximum(0.0, n_world[sel] @ scene.light)
        shade = albedo * (scene.ambient + (1 - scene.ambient) * lam)
        if mat.kind == "specular":
            spec = mat.highlight * np.maximum(0.0, np.sum(n_world[sel] * half[sel], -1)) ** mat.shininess
            shade = shade + spec
            th = np.minimum(theta[sel], np.nextafter(np.pi / 2, 0))
            rho[sel] = np.clip(fresnel_dop(th, mat.refractive_index), 0.0, 1.0)
            specular[sel] = True
        else:
            rho[sel] = mat.rho_diffuse
        iota[sel] = np.clip(shade, 0.0, 1.0)

    disp_vals = np.where(sky, 0.0, kappa / np.where(sky, 1.0, depth))
    disparity = DisparityMap(disp_vals, kappa, ~sky)

    # Angle of polarization from the pixel-triplet E-field on true geometry.
    fa = field_angles(disparity, K)
    same = np.zeros((h, w), bool)
    same[1:, :-1] = (prim[1:, :-1] == prim[:-1, :-1]) & (prim[1:, :-1] == prim[1:, 1:])
    good = fa.scoreable & same & ~sky
    fallback = _analytic_angles(n_cam, K, depth)
    alpha = np.where(good, fa.angle, np.nan_to_num(fallback))
    alpha = np.where(specular, alpha, wrap_half_pi(alpha + np.pi / 2))
    alpha = np.where(sky, 0.0, wrap_half_pi(alpha))
    confidence = good & specular & (rho > 0)

    polar = PolarImage(iota=iota, alpha=alpha, rho=rho, confidence=confidence)
    return RenderedView(polar=polar, depth_gt=depth, disparity_gt=disparity, normals_gt=n_cam,
                        sky_mask=sky, camera=K, pose=pose, primitive_id=prim, specular=specular)


def _analytic_angles(n_cam, K: CameraIntrinsics, depth):
    rays = K.rays()
    w = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    e = np.cross(n_cam, w)
    A = K.fx * (e[..., 0] - rays[..., 0] * e[..., 2])
    B = K.fy * (e[..., 1] - rays[..., 1] * e[..., 2])
    with np.errstate(invalid="ignore"):
        return np.where(np.hypot(A, B) > 0, wrap_half_pi(np.arctan2(A, B)), np.nan)


def render_sequence(scene: Scene, K: CameraIntrinsics, poses, kappa: float = 1.0,
                    threads: int = 1) -> list[RenderedView]:
    """Render one view per world-to-camera pose (at least two)."""
    poses = list(poses)
    if len(poses) < 2:
        raise ConfigurationError("a sequence needs at least two poses")
    return [render_view(scene, K, p, kappa, threads) for p in poses]
