"""Pinhole camera geometry.

Pixel coordinates are ``(u, v)`` = (column, row); grids are indexed ``[v, u]``.
Camera frame: x right, y down, z forward.  Image-plane angles are measured
from the +v (vertical) axis towards +u and wrapped modulo pi into
[-pi/2, pi/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    ConfigurationError,
    DegenerateGeometryError,
    DimensionError,
)
from .polar import wrap_half_pi

DEGENERATE_SIN = 1e-12
BACKPROJECT_REL_STEP = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # Crops of a valid camera may legitimately move the principal point off-image.
    cropped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be positive")
        if not self.cropped and not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def crop(self, row0: int, col0: int, height: int, width: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx, self.fy, self.cx - col0, self.cy - row0, width, height,
                                cropped=True)

    def pixel_grid(self):
        """Return ``(u, v)`` coordinate grids of shape (height, width)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        return u, v

    def rays(self) -> np.ndarray:
        """Un-normalized rays ``((u-cx)/fx, (v-cy)/fy, 1)``, shape (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)

    def project(self, points: np.ndarray):
        """Project camera-frame points (..., 3) to ``(u, v)``."""
        z = points[..., 2]
        return (self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy)


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform ``x' = R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0):
            raise ConfigurationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ConfigurationError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_translation(cls, tx=0.0, ty=0.0, tz=0.0) -> "RigidPose":
        return cls(np.eye(3), np.array([tx, ty, tz], dtype=float))

    @classmethod
    def from_flat(cls, values) -> "RigidPose":
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 12:
            raise DimensionError(f"pose needs 12 numbers, got {values.size}")
        return cls(values[:9].reshape(3, 3), values[9:])

    def flat(self) -> list[float]:
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    def apply(self, points: np.ndarray) -> np.ndarray:
        # Explicit sums rather than BLAS keep results independent of thread count.
        r, t = self.rotation, self.translation
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        return np.stack([r[i, 0] * x + r[i, 1] * y + r[i, 2] * z + t[i] for i in range(3)], -1)

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        r = self.rotation
        x, y, z = vectors[..., 0], vectors[..., 1], vectors[..., 2]
        return np.stack([r[i, 0] * x + r[i, 1] * y + r[i, 2] * z for i in range(3)], -1)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def relative_pose(target_world_to_cam: RigidPose, source_world_to_cam: RigidPose) -> RigidPose:
    """Transform taking target-camera coordinates to source-camera coordinates."""
    return source_world_to_cam.compose(target_world_to_cam.inverse())


@dataclass(frozen=True)
class DisparityMap:
    """Dimensionless disparity ``D`` with depth ``z = kappa / D``."""

    values: np.ndarray
    kappa: float = 1.0
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise DimensionError("disparity must be 2-D")
        valid = vals > 0 if self.valid is None else np.asarray(self.valid, bool) & (vals > 0)
        if valid.shape != vals.shape:
            raise DimensionError("validity mask shape mismatch")
        if not self.kappa > 0:
            raise ConfigurationError("kappa must be positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape

    def depth(self) -> np.ndarray:
        """Metric depth, ``inf`` on invalid pixels."""
        out = np.full(self.values.shape, np.inf)
        out[self.valid] = self.kappa / self.values[self.valid]
        return out

    def with_values(self, values: np.ndarray) -> "DisparityMap":
        return DisparityMap(values, self.kappa, self.valid)

    def crop(self, rows: slice, cols: slice) -> "DisparityMap":
        return DisparityMap(self.values[rows, cols], self.kappa, self.valid[rows, cols])


def _check_pixel(px, K: CameraIntrinsics) -> tuple[int, int]:
    u, v = int(px[0]), int(px[1])
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise BoundsError(f"pixel {px} outside {K.width}x{K.height} image")
    return u, v


def project_pixel(px, disp: DisparityMap, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``px = (u, v)`` to its 3-D camera-frame point."""
    u, v = _check_pixel(px, K)
    d = disp.values[v, u]
    if not d > 0:
        raise DegenerateGeometryError(f"non-positive disparity {d} at {px}")
    z = disp.kappa / d
    return np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])


def lift(disp: DisparityMap, K: CameraIntrinsics) -> np.ndarray:
    """3-D points for every pixel, NaN where the disparity is invalid."""
    z = np.where(disp.valid, disp.kappa / np.where(disp.valid, disp.values, 1.0), np.nan)
    return K.rays() * z[..., None]


def view_ray(q, K: CameraIntrinsics) -> np.ndarray:
    """Unit vector from the surface point at ``q`` towards the camera center."""
    u, v = _check_pixel(q, K)
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return -ray / np.linalg.norm(ray)


def view_rays(K: CameraIntrinsics) -> np.ndarray:
    rays = K.rays()
    return -rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _triplet(q, stride: int, neighbors):
    if neighbors is not None:
        return neighbors
    u, v = q
    return (u, v - stride), (u + stride, v)


def _raw_normal(q, disp, K, stride, neighbors):
    p, r = _triplet(q, stride, neighbors)
    Q = project_pixel(q, disp, K)
    a = project_pixel(p, disp, K) - Q
    b = project_pixel(r, disp, K) - Q
    n = np.cross(a, b)
    scale = np.linalg.norm(a) * np.linalg.norm(b)
    if scale == 0 or np.linalg.norm(n) < DEGENERATE_SIN * scale:
        raise DegenerateGeometryError(f"degenerate pixel triplet at {q}")
    if np.dot(n, Q) > 0:
        n = -n
    return n, Q


def local_normal(q, disp: DisparityMap, K: CameraIntrinsics, stride: int = 1,
                 neighbors=None) -> np.ndarray:
    """Camera-facing unit normal of the plane through the pixel triplet at ``q``.

    The triplet is ``p = q + (0, -stride)``, ``q``, ``r = q + (stride, 0)``
    unless ``neighbors=(p, r)`` is given explicitly.
    """
    n, _ = _raw_normal(q, disp, K, stride, neighbors)
    return n / np.linalg.norm(n)


def electric_field(q, disp: DisparityMap, K: CameraIntrinsics, stride: int = 1) -> np.ndarray:
    """Unit electric-field direction ``normalize(n x R_w)`` at pixel ``q``."""
    n, _ = _raw_normal(q, disp, K, stride, None)
    w = view_ray(q, K)
    e = np.cross(n, w)
    if np.linalg.norm(e) < DEGENERATE_SIN * np.linalg.norm(n):
        raise DegenerateGeometryError(f"normal parallel to the reflected ray at {q}")
    return e / np.linalg.norm(e)


def backproject_angle(E, Q, K: CameraIntrinsics) -> float:
    """Image-plane orientation of field direction ``E`` anchored at point ``Q``.

    Projects ``Q`` and ``Q + eps*E`` with ``eps = 1e-4 * z`` and returns the
    angle of the image displacement from the vertical axis, modulo pi.
    """
    E = np.asarray(E, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if not Q[2] > 0:
        raise DegenerateGeometryError("point behind the camera")
    eps = BACKPROJECT_REL_STEP * Q[2]
    u0, v0 = K.project(Q)
    u1, v1 = K.project(Q + eps * E)
    du, dv = u1 - u0, v1 - v0
    if np.hypot(du, dv) <= 1e-8 * eps * max(K.fx, K.fy) / Q[2]:
        raise DegenerateGeometryError("field direction projects to a point")
    return float(wrap_half_pi(np.arctan2(du, dv)))


def backproject_angle_analytic(E, Q, K: CameraIntrinsics) -> float:
    """Same angle from the projection Jacobian (independent route)."""
    E = np.asarray(E, dtype=float)
    Q = np.asarray(Q, dtype=float)
    du = K.fx * (E[0] * Q[2] - Q[0] * E[2])
    dv = K.fy * (E[1] * Q[2] - Q[1] * E[2])
    if np.hypot(du, dv) == 0:
        raise DegenerateGeometryError("field direction projects to a point")
    return float(wrap_half_pi(np.arctan2(du, dv)))


def _shift(a: np.ndarray, dv: int, du: int, fill):
    """``out[v, u] = a[v + dv, u + du]`` with ``fill`` outside."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    vs = slice(max(0, -dv), min(h, h - dv))
    us = slice(max(0, -du), min(w, w - du))
    vs_src = slice(vs.start + dv, vs.stop + dv)
    us_src = slice(us.start + du, us.stop + du)
    out[vs, us] = a[vs_src, us_src]
    return out


@dataclass
class FieldAngles:
    """Vectorized normal / E-field / back-projected angle for a whole grid.

    ``angle`` is NaN where ``scoreable`` is false.  When computed with
    tangents, ``d_angle[k]`` holds the derivative of ``angle`` with respect to
    the disparity of the triplet member k (0 = p, 1 = q, 2 = r).
    """

    angle: np.ndarray
    scoreable: np.ndarray
    normal: np.ndarray
    efield: np.ndarray
    d_angle: np.ndarray | None = None
    stride: int = 1


def field_angles(disp: DisparityMap, K: CameraIntrinsics, stride: int = 1,
                 with_tangents: bool = False) -> FieldAngles:
    """Run lift -> normal -> E-field -> back-projection on every pixel."""
    if disp.shape != K.shape:
        raise DimensionError(f"disparity {disp.shape} does not match camera {K.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    rays = K.rays()
    dvals = np.where(disp.valid, disp.values, 1.0)
    z = disp.kappa / dvals
    pts = rays * z[..., None]
    P = _shift(pts, -stride, 0, np.nan)
    R = _shift(pts, 0, stride, np.nan)
    Dp = _shift(dvals, -stride, 0, 1.0)
    Dr = _shift(dvals, 0, stride, 1.0)
    valid = (disp.valid & _shift(disp.valid, -stride, 0, False)
             & _shift(disp.valid, 0, stride, False))

    a = P - pts
    b = R - pts
    n = np.cross(a, b)
    w = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    e = np.cross(n, w)
    n_norm = np.linalg.norm(n, axis=-1)
    e_norm = np.linalg.norm(e, axis=-1)
    scale = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    with np.errstate(invalid="ignore"):
        ok = valid & (n_norm >= DEGENERATE_SIN * scale) & (scale > 0)
        ok &= e_norm >= DEGENERATE_SIN * n_norm

    x_q, y_q = rays[..., 0], rays[..., 1]
    A = K.fx * (e[..., 0] - x_q * e[..., 2])
    B = K.fy * (e[..., 1] - y_q * e[..., 2])
    with np.errstate(invalid="ignore"):
        ok &= np.hypot(A, B) > 0
    # Value route: finite displacement along E, as in backproject_angle.
    safe_e = np.where(ok[..., None], e / np.where(ok, e_norm, 1.0)[..., None], 0.0)
    eps = BACKPROJECT_REL_STEP * z
    u0, v0 = K.project(pts)
    u1, v1 = K.project(pts + eps[..., None] * safe_e)
    angle = np.where(ok, wrap_half_pi(np.arctan2(u1 - u0, v1 - v0)), np.nan)

    sign = np.where(np.sum(n * pts, -1) > 0, -1.0, 1.0)
    unit_n = np.where(ok[..., None], sign[..., None] * n / np.where(ok, n_norm, 1.0)[..., None], np.nan)
    out = FieldAngles(angle=angle, scoreable=ok, normal=unit_n,
                      efield=np.where(ok[..., None], safe_e, np.nan), stride=stride)
    if not with_tangents:
        return out

    # d(point)/dD = -point / D for each triplet member.
    dP = -P / Dp[..., None]
    dQ = -pts / dvals[..., None]
    dR = -R / Dr[..., None]
    dn = np.stack([
        np.cross(dP, b),
        np.cross(-dQ, b) + np.cross(a, -dQ),
        np.cross(a, dR),
    ])
    de = np.cross(dn, w[None])
    dA = K.fx * (de[..., 0] - x_q * de[..., 2])
    dB = K.fy * (de[..., 1] - y_q * de[..., 2])
    denom = np.where(ok, A * A + B * B, 1.0)
    d_angle = np.where(ok, (B * dA - A * dB) / denom, 0.0)
    out.d_angle = d_angle
    return out


@dataclass
class WarpResult:
    warped: np.ndarray
    valid: np.ndarray
    u: np.ndarray
    v: np.ndarray
    du_dD: np.ndarray | None = None
    dv_dD: np.ndarray | None = None
    dval_du: np.ndarray | None = None
    dval_dv: np.ndarray | None = None
    cell: np.ndarray | None = None


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample ``img`` (H, W[, C]) at float coordinates with border clamping.

    Returns values, d/du, d/dv and the integer top-left cell index used.
    """
    h, w = img.shape[:2]
    uc = np.clip(u, 0.0, w - 1)
    vc = np.clip(v, 0.0, h - 1)
    u0 = np.minimum(np.floor(uc).astype(int), max(w - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(int), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = uc - u0
    b = vc - v0
    if img.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    i00 = img[v0, u0]
    i10 = img[v0, u1]
    i01 = img[v1, u0]
    i11 = img[v1, u1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    d_u = (1 - b) * (i10 - i00) + b * (i11 - i01)
    d_v = (1 - a) * (i01 - i00) + a * (i11 - i10)
    # Clamped coordinates do not move the sample.
    inside_u = (u >= 0) & (u <= w - 1)
    inside_v = (v >= 0) & (v <= h - 1)
    if img.ndim == 3:
        inside_u = inside_u[..., None]
        inside_v = inside_v[..., None]
    d_u = np.where(inside_u, d_u, 0.0)
    d_v = np.where(inside_v, d_v, 0.0)
    cell = v0 * w + u0
    return val, d_u, d_v, cell


def _snap(x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # Sample positions landing on integers up to round-off (pure lateral motion,
    # identity pose) must not flip between bilinear cells or border validity.
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)


def warp_image(source: np.ndarray, disp: DisparityMap, pose: RigidPose, K: CameraIntrinsics,
               with_jacobian: bool = False):
    """Synthesize the target view from ``source``.

    Each target pixel is lifted with its disparity, moved into the source
    camera with ``pose`` (target -> source) and bilinearly sampled.  Returns
    ``(warped, valid)``; with ``with_jacobian=True`` a :class:`WarpResult`
    carrying per-pixel derivatives with respect to the disparity.
    """
    source = np.asarray(source, dtype=float)
    if source.shape[:2] != K.shape or disp.shape != K.shape:
        raise DimensionError("source, disparity and camera sizes differ")
    rays = K.rays()
    dvals = np.where(disp.valid, disp.values, 1.0)
    z = disp.kappa / dvals
    pts = rays * z[..., None]
    xs = pose.apply(pts)
    zs = xs[..., 2]
    front = zs > 1e-12
    zs_safe = np.where(front, zs, 1.0)
    us = K.fx * xs[..., 0] / zs_safe + K.cx
    vs = K.fy * xs[..., 1] / zs_safe + K.cy
    u_id, v_id = K.pixel_grid()
    usable = disp.valid & front
    us = _snap(np.where(usable, us, u_id))
    vs = _snap(np.where(usable, vs, v_id))
    h, w = K.shape
    valid = usable & (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)
    val, d_u, d_v, cell = bilinear_sample(source, us, vs)
    if not with_jacobian:
        return val, valid

    dxs = pose.apply_vector(-pts / dvals[..., None])
    du = K.fx * (dxs[..., 0] * zs_safe - xs[..., 0] * dxs[..., 2]) / zs_safe ** 2
    dv = K.fy * (dxs[..., 1] * zs_safe - xs[..., 1] * dxs[..., 2]) / zs_safe ** 2
    du = np.where(usable, du, 0.0)
    dv = np.where(usable, dv, 0.0)
    return WarpResult(val, valid, us, vs, du, dv, d_u, d_v, cell)


def fit_plane_normal(points: np.ndarray) -> np.ndarray:
    """Least-squares plane normal of an (N, 3) point set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) < 3:
        raise DegenerateGeometryError("need at least three points to fit a plane")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[-1]


def angle_between(n1, n2, unsigned: bool = True) -> float:
    """Angle in radians between two directions (sign-agnostic by default)."""
    n1 = np.asarray(n1, float) / np.linalg.norm(n1)
    n2 = np.asarray(n2, float) / np.linalg.norm(n2)
    c = float(np.dot(n1, n2))
    if unsigned:
        c = abs(c)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
