"""Self-supervised depth objective with a polarimetric consistency term.

Every term is differentiated analytically with respect to the disparity
field.  The total is::

    Lambda = mean_r(mu * L_r) + lambda * mean_s(L_s) + mean_pol(tau * C_pol)

where each mean runs over the pixels on which that term is defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import BoundsError, ConfigurationError, DegenerateGeometryError, DimensionError, EmptyAggregationError
from .geometry import (
    CameraIntrinsics,
    DisparityMap,
    RigidPose,
    backproject_angle,
    electric_field,
    field_angles,
    project_pixel,
    warp_image,
)
from .polar import PolarImage, specular_mask, wrap_half_pi

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
TAN_CLAMP = 1e6


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.85
    lam: float = 1e-3
    rho_threshold: float = 0.4
    rho_ceiling: float = 0.8
    # "pixel": tau masks C_pol inside the mean; "gate": tau acts as a scalar switch.
    aggregation: str = "pixel"
    disable_lpol: bool = False
    stride: int = 1
    tan_clamp: float = TAN_CLAMP

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.rho_threshold <= self.rho_ceiling <= 1.0:
            raise ConfigurationError("need 0 < rho_threshold <= rho_ceiling <= 1")
        if self.aggregation not in ("pixel", "gate"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        if self.stride < 1 or not self.tan_clamp > 0:
            raise ConfigurationError("stride must be >= 1 and tan_clamp positive")

    @classmethod
    def from_mapping(cls, data) -> "LossWeights":
        data = dict(data or {})
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown weight keys: {sorted(unknown)}")
        return cls(**data)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img[..., None]
    if img.ndim == 3:
        return img
    raise DimensionError(f"image must be 2-D or 3-D, got shape {img.shape}")


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def _pad_index(h: int, w: int) -> np.ndarray:
    return np.pad(np.arange(h * w).reshape(h, w), 1, mode="reflect")


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="reflect")


def _box(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """3x3 mean over a reflect-padded (h+2, w+2, C) array."""
    acc = np.zeros((h, w) + xp.shape[2:])
    for dv in range(3):
        for du in range(3):
            acc += xp[dv:dv + h, du:du + w]
    return acc / 9.0


def _box_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_box`: (h, w, C) -> padded (h+2, w+2, C)."""
    h, w = g.shape[:2]
    out = np.zeros((h + 2, w + 2) + g.shape[2:])
    for dv in range(3):
        for du in range(3):
            out[dv:dv + h, du:du + w] += g
    return out / 9.0


def _fold(gp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of reflect padding."""
    idx = _pad_index(h, w).ravel()
    out = np.empty((h, w, gp.shape[2]))
    for c in range(gp.shape[2]):
        out[..., c] = np.bincount(idx, weights=gp[..., c].ravel(), minlength=h * w).reshape(h, w)
    return out


@dataclass
class _SSIMParts:
    ssim: np.ndarray
    dS_dMb: np.ndarray
    dS_dMbb: np.ndarray
    dS_dMab: np.ndarray
    a_pad: np.ndarray
    b_pad: np.ndarray


def _ssim_parts(a: np.ndarray, b: np.ndarray) -> _SSIMParts:
    h, w = a.shape[:2]
    ap, bp = _pad(a), _pad(b)
    mu_a, mu_b = _box(ap, h, w), _box(bp, h, w)
    s_aa = _box(ap * ap, h, w) - mu_a ** 2
    s_bb = _box(bp * bp, h, w) - mu_b ** 2
    s_ab = _box(ap * bp, h, w) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * s_ab + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = s_aa + s_bb + SSIM_C2
    s = n1 * n2 / (d1 * d2)
    dd = d1 * d2
    dS_dMb = 2 * mu_a * n2 / dd - 2 * mu_b * s / d1 + 2 * mu_b * s / d2 - 2 * mu_a * n1 / dd
    return _SSIMParts(s, dS_dMb, -s / d2, 2 * n1 / dd, ap, bp)


def _ssim_adjoint(parts: _SSIMParts, g: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(g * ssim)`` with respect to the second image."""
    h, w = g.shape[:2]
    gp = (_box_adjoint(g * parts.dS_dMb)
          + 2 * parts.b_pad * _box_adjoint(g * parts.dS_dMbb)
          + parts.a_pad * _box_adjoint(g * parts.dS_dMab))
    return _fold(gp, h, w)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM over a 3x3 uniform window with reflective borders.

    Multi-channel inputs give one map per channel (channel-last).
    """
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    _check_same(a_arr, b_arr)
    s = _ssim_parts(_as_hwc(a_arr), _as_hwc(b_arr)).ssim
    return s[..., 0] if a_arr.ndim == 2 else s


def _dssim(s):
    # SSIM of identical windows can round to just above 1.
    return np.maximum(1.0 - s, 0.0)


def photometric_error(a, b, w: LossWeights = LossWeights()) -> np.ndarray:
    """``beta/2 * (1 - SSIM) + (1 - beta) * |a - b|``, averaged over channels."""
    a3, b3 = _as_hwc(a), _as_hwc(b)
    _check_same(a3, b3)
    s = _ssim_parts(a3, b3).ssim
    pe = 0.5 * w.beta * _dssim(s) + (1.0 - w.beta) * np.abs(a3 - b3)
    return pe.mean(axis=-1)


def _pe_adjoint(a3, b3, parts: _SSIMParts, g: np.ndarray, beta: float) -> np.ndarray:
    """Gradient of ``sum(g * pe(a, b))`` with respect to ``b`` (H, W, C)."""
    c = a3.shape[2]
    gc = np.repeat(g[..., None], c, axis=2) / c
    return -0.5 * beta * _ssim_adjoint(parts, gc) + (1.0 - beta) * np.sign(b3 - a3) * gc


def _check_sources(sources):
    if not sources:
        raise ConfigurationError("at least one source view is required")


def reprojection_loss(target, sources, disp: DisparityMap, K: CameraIntrinsics,
                      w: LossWeights = LossWeights()):
    """Per-pixel minimum photometric error over warped source views.

    Returns ``(L_r map, [pe map per source])``.  Pixels where no source warp
    is valid hold NaN in the minimum map; per-source maps hold NaN where that
    source is invalid.
    """
    _check_sources(sources)
    t3 = _as_hwc(target)
    maps = []
    for img, pose in sources:
        warped, valid = warp_image(_as_hwc(img), disp, pose, K)
        pe = photometric_error(t3, warped, w)
        maps.append(np.where(valid, pe, np.nan))
    stack = np.stack(maps)
    with np.errstate(all="ignore"):
        lr = np.where(np.all(np.isnan(stack), 0), np.nan,
                      np.nanmin(np.where(np.isnan(stack), np.inf, stack), 0))
    return lr, maps


def automask(target, sources, disp: DisparityMap, K: CameraIntrinsics,
             w: LossWeights = LossWeights()) -> np.ndarray:
    """Pixels where warping beats leaving the source views unwarped."""
    _check_sources(sources)
    lr, _ = reprojection_loss(target, sources, disp, K, w)
    t3 = _as_hwc(target)
    ident = np.min(np.stack([photometric_error(t3, _as_hwc(img), w) for img, _ in sources]), 0)
    with np.errstate(invalid="ignore"):
        return np.isfinite(lr) & (lr < ident)


def _second_diffs(x: np.ndarray):
    """Centered second differences along x (columns) and y (rows); NaN on borders."""
    dx = np.full(x.shape, np.nan)
    dy = np.full(x.shape, np.nan)
    dx[:, 1:-1] = x[:, :-2] - 2 * x[:, 1:-1] + x[:, 2:]
    dy[1:-1, :] = x[:-2, :] - 2 * x[1:-1, :] + x[2:, :]
    return dx, dy


def smoothness_valid(disp: DisparityMap) -> np.ndarray:
    """Pixels whose full 3x3 cross stencil has valid disparity."""
    v = disp.valid
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = (v[1:-1, 1:-1] & v[:-2, 1:-1] & v[2:, 1:-1]
                       & v[1:-1, :-2] & v[1:-1, 2:])
    return out


def _mean_disparity(disp: DisparityMap) -> float:
    if not disp.valid.any():
        raise EmptyAggregationError("no valid disparity for mean normalization")
    m = float(np.mean(disp.values[disp.valid]))
    if m == 0:
        raise DegenerateGeometryError("mean disparity is zero")
    return m


def _guide_weights(guide, shape):
    g = _as_hwc(guide).mean(axis=-1)
    if g.shape != shape:
        raise DimensionError("guide image does not match disparity")
    gx, gy = _second_diffs(g)
    return np.exp(-np.abs(np.nan_to_num(gx))), np.exp(-np.abs(np.nan_to_num(gy)))


def second_order_smoothness(disp: DisparityMap, guide) -> np.ndarray:
    """Edge-aware second-order smoothness of the mean-normalized disparity.

    Zero on pixels lacking a complete stencil (see :func:`smoothness_valid`).
    """
    m = _mean_disparity(disp)
    dstar = np.where(disp.valid, disp.values, 0.0) / m
    dx, dy = _second_diffs(dstar)
    wx, wy = _guide_weights(guide, disp.shape)
    vs = smoothness_valid(disp)
    ls = np.abs(np.nan_to_num(dx)) * wx + np.abs(np.nan_to_num(dy)) * wy
    return np.where(vs, ls, 0.0)


def diffuse_loss(lr_map, mu, ls_map, w: LossWeights = LossWeights(), r_valid=None, s_valid=None) -> float:
    """``mean_r(mu * L_r) + lambda * mean_s(L_s)``.

    Without explicit validity masks both means run over all pixels, which is
    the plain mean of ``mu * L_r + lambda * L_s``.
    """
    lr = np.asarray(lr_map, dtype=float)
    ls = np.asarray(ls_map, dtype=float)
    mu = np.asarray(mu, dtype=bool)
    if not (lr.shape == ls.shape == mu.shape):
        raise DimensionError("loss maps differ in shape")
    r_valid = np.ones(lr.shape, bool) if r_valid is None else np.asarray(r_valid, bool)
    s_valid = np.ones(lr.shape, bool) if s_valid is None else np.asarray(s_valid, bool)
    if not r_valid.any() or not s_valid.any():
        raise EmptyAggregationError("no valid pixels for the diffuse loss")
    lr_term = np.sum(np.where(r_valid & mu, lr, 0.0)) / r_valid.sum()
    ls_term = np.sum(np.where(s_valid, ls, 0.0)) / s_valid.sum()
    return float(lr_term + w.lam * ls_term)


def _tan_term(delta, rho, clamp):
    t = np.tan(delta)
    mag = np.abs(t)
    clamped = mag >= clamp
    return rho * np.minimum(mag, clamp), t, clamped


def c_pol(q, disp: DisparityMap, polar: PolarImage, K: CameraIntrinsics,
          stride: int = 1, tan_clamp: float = TAN_CLAMP):
    """Polarimetric penalty at pixel ``q``; ``None`` if the pixel cannot be scored."""
    u, v = int(q[0]), int(q[1])
    if not polar.confidence[v, u]:
        return None
    try:
        e = electric_field((u, v), disp, K, stride)
        angle = backproject_angle(e, project_pixel((u, v), disp, K), K)
    except (DegenerateGeometryError, BoundsError):
        # Border pixels lack the triplet neighborhood.
        return None
    delta = wrap_half_pi(angle - polar.alpha[v, u])
    # wrap_half_pi maps to [-pi/2, pi/2); the tangent magnitude is symmetric.
    val, _, _ = _tan_term(delta, polar.rho[v, u], tan_clamp)
    return float(val)


def c_pol_map(disp: DisparityMap, polar: PolarImage, K: CameraIntrinsics,
              stride: int = 1, tan_clamp: float = TAN_CLAMP):
    """Vectorized C_pol.  Returns ``(map, scoreable)``; the map is 0 off ``scoreable``."""
    if polar.shape != disp.shape:
        raise DimensionError("polar image does not match disparity")
    fa = field_angles(disp, K, stride)
    ok = fa.scoreable & polar.confidence
    delta = np.where(ok, fa.angle - polar.alpha, 0.0)
    val, _, _ = _tan_term(delta, polar.rho, tan_clamp)
    return np.where(ok, val, 0.0), ok


def polarimetric_loss(disp: DisparityMap, polar: PolarImage, K: CameraIntrinsics,
                      stride: int = 1, tan_clamp: float = TAN_CLAMP, empty_ok: bool = False) -> float:
    """Mean C_pol over every scoreable pixel."""
    cmap, ok = c_pol_map(disp, polar, K, stride, tan_clamp)
    n = int(ok.sum())
    if n == 0:
        if empty_ok:
            return 0.0
        raise EmptyAggregationError("no scoreable pixels for the polarimetric loss")
    return float(np.sum(cmap[ok]) / n)


@dataclass
class LossBreakdown:
    L_r: float
    L_s: float
    L_pol: float
    L_diff: float
    Lambda: float
    maps: dict = field(default_factory=dict)
    mu: np.ndarray | None = None
    tau: np.ndarray | None = None
    gradient: np.ndarray | None = None
    term_gradients: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"Lambda": self.Lambda, "L_r": self.L_r, "L_s": self.L_s,
                "L_pol": self.L_pol, "L_diff": self.L_diff}


def _scatter_shift(grad, contrib, dv, du):
    """``grad[v + dv, u + du] += contrib[v, u]`` for in-bounds targets."""
    h, w = grad.shape
    vs = slice(max(0, -dv), min(h, h - dv))
    us = slice(max(0, -du), min(w, w - du))
    grad[vs.start + dv:vs.stop + dv, us.start + du:us.stop + du] += contrib[vs, us]


def total_loss(target, sources, disp: DisparityMap, polar: PolarImage, K: CameraIntrinsics,
               w: LossWeights = LossWeights(), with_gradient: bool = True) -> LossBreakdown:
    """Evaluate every loss term, masks, per-pixel maps and d(term)/dD.

    ``sources`` is a list of ``(image, pose)`` with ``pose`` mapping target
    camera coordinates to the source camera.
    """
    _check_sources(sources)
    t3 = _as_hwc(target)
    if t3.shape[:2] != disp.shape or disp.shape != K.shape or polar.shape != disp.shape:
        raise DimensionError("target, disparity, polar image and camera sizes differ")
    h, wd = disp.shape
    state = {}

    # Reprojection term.
    pes, warps, parts_list, ident = [], [], [], []
    for img, pose in sources:
        s3 = _as_hwc(img)
        _check_same(t3, s3)
        wr = warp_image(s3, disp, pose, K, with_jacobian=True)
        parts = _ssim_parts(t3, wr.warped)
        pe = (0.5 * w.beta * _dssim(parts.ssim) + (1.0 - w.beta) * np.abs(t3 - wr.warped)).mean(-1)
        pes.append(pe)
        warps.append(wr)
        parts_list.append(parts)
        ident.append(photometric_error(t3, s3, w))
    valid_stack = np.stack([wr.valid for wr in warps])
    pe_stack = np.where(valid_stack, np.stack(pes), np.inf)
    best = np.argmin(pe_stack, axis=0)
    lr_map = np.take_along_axis(pe_stack, best[None], 0)[0]
    r_valid = valid_stack.any(0)
    lr_map = np.where(r_valid, lr_map, 0.0)
    mu = r_valid & (lr_map < np.min(np.stack(ident), 0))
    n_r = int(r_valid.sum())
    if n_r == 0:
        raise EmptyAggregationError("no pixel has a valid reprojection")
    L_r = float(np.sum(np.where(mu, lr_map, 0.0)) / n_r)

    # Smoothness term.
    s_valid = smoothness_valid(disp)
    n_s = int(s_valid.sum())
    if n_s == 0:
        raise EmptyAggregationError("no pixel has a complete smoothness stencil")
    m = _mean_disparity(disp)
    dstar = np.where(disp.valid, disp.values, 0.0) / m
    dx, dy = _second_diffs(dstar)
    dx, dy = np.nan_to_num(dx), np.nan_to_num(dy)
    wx, wy = _guide_weights(t3, disp.shape)
    ls_map = np.where(s_valid, np.abs(dx) * wx + np.abs(dy) * wy, 0.0)
    L_s = float(np.sum(ls_map) / n_s)
    L_diff = L_r + w.lam * L_s

    # Polarimetric term.
    tau = np.zeros(disp.shape, bool) if w.disable_lpol else specular_mask(polar, w.rho_threshold)
    rho_c = np.minimum(polar.rho, w.rho_ceiling)
    cpol_map = np.zeros(disp.shape)
    L_pol = 0.0
    pol_weight = np.zeros(disp.shape)
    fa = None
    scoreable = np.zeros(disp.shape, bool)
    t_vals = np.zeros(disp.shape)
    clamped = np.zeros(disp.shape, bool)
    if not w.disable_lpol:
        fa = field_angles(disp, K, w.stride, with_tangents=with_gradient)
        scoreable = fa.scoreable & polar.confidence
        delta = np.where(scoreable, fa.angle - polar.alpha, 0.0)
        vals, t_vals, clamped = _tan_term(delta, rho_c, w.tan_clamp)
        cpol_map = np.where(scoreable, vals, 0.0)
        n_pol = int(scoreable.sum())
        if n_pol:
            if w.aggregation == "pixel":
                pol_weight = np.where(scoreable & tau, 1.0 / n_pol, 0.0)
            elif tau.any():
                pol_weight = np.where(scoreable, 1.0 / n_pol, 0.0)
            L_pol = float(np.sum(pol_weight * cpol_map))
    Lambda = L_diff + L_pol

    state.update(best=np.where(r_valid, best, -1), mu=mu, r_valid=r_valid, s_valid=s_valid,
                 sx=np.sign(dx), sy=np.sign(dy), scoreable=scoreable, clamped=clamped,
                 tsign=np.sign(t_vals))
    for i, wr in enumerate(warps):
        state[f"valid{i}"] = wr.valid
        state[f"cell{i}"] = wr.cell
        state[f"l1sign{i}"] = np.sign(wr.warped - t3)

    maps = {"L_r": lr_map, "L_s": ls_map, "C_pol": cpol_map,
            "r_valid": r_valid, "s_valid": s_valid, "pol_scoreable": scoreable}
    for i, pe in enumerate(pes):
        maps[f"pe{i}"] = np.where(warps[i].valid, pe, np.nan)
    out = LossBreakdown(L_r=L_r, L_s=L_s, L_pol=L_pol, L_diff=L_diff, Lambda=Lambda,
                        maps=maps, mu=mu, tau=tau, state=state)
    if not with_gradient:
        return out

    # d L_r / dD: through the selected source's warp at every window pixel.
    g_r = np.zeros(disp.shape)
    upstream = np.where(mu, 1.0 / n_r, 0.0)
    for i, (wr, parts) in enumerate(zip(warps, parts_list)):
        g_i = np.where(best == i, upstream, 0.0)
        if not g_i.any():
            continue
        gb = _pe_adjoint(t3, wr.warped, parts, g_i, w.beta)
        dval = wr.dval_du * wr.du_dD[..., None] + wr.dval_dv * wr.dv_dD[..., None]
        g_r += np.sum(gb * dval, axis=-1)

    # d L_s / dD through the stencil and the mean normalization.
    gx = np.where(s_valid, np.sign(dx) * wx, 0.0) / n_s
    gy = np.where(s_valid, np.sign(dy) * wy, 0.0) / n_s
    g_star = np.zeros(disp.shape)
    g_star[:, :-2] += gx[:, 1:-1]
    g_star[:, 1:-1] -= 2 * gx[:, 1:-1]
    g_star[:, 2:] += gx[:, 1:-1]
    g_star[:-2, :] += gy[1:-1, :]
    g_star[1:-1, :] -= 2 * gy[1:-1, :]
    g_star[2:, :] += gy[1:-1, :]
    g_star = np.where(disp.valid, g_star, 0.0)
    n_valid = int(disp.valid.sum())
    g_s = g_star / m - np.sum(g_star * dstar) / (m * n_valid)
    g_s = np.where(disp.valid, g_s, 0.0)

    # d L_pol / dD through the pixel triplet {p, q, r}.
    g_pol = np.zeros(disp.shape)
    if fa is not None and pol_weight.any():
        dC_dangle = np.where(clamped, 0.0, pol_weight * rho_c * np.sign(t_vals) * (1.0 + t_vals ** 2))
        s = w.stride
        _scatter_shift(g_pol, dC_dangle * fa.d_angle[0], -s, 0)
        g_pol += dC_dangle * fa.d_angle[1]
        _scatter_shift(g_pol, dC_dangle * fa.d_angle[2], 0, s)

    out.term_gradients = {"L_r": g_r, "L_s": g_s, "L_pol": g_pol,
                          "L_diff": g_r + w.lam * g_s}
    out.gradient = g_r + w.lam * g_s + g_pol
    out.term_gradients["Lambda"] = out.gradient
    return out
