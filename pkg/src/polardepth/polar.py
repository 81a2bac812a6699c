"""Decoding of division-of-focal-plane polarization measurements.

Raw mosaic frames are demosaiced into four analyzer channels, combined into
linear Stokes parameters and finally into the (intensity, angle, degree)
triplet used everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError

ANALYZER_ANGLES = (0, 45, 90, 135)
DEFAULT_PATTERN = (90, 45, 135, 0)
UNDEFINED_EPS = 1e-12


def wrap_half_pi(angle):
    """Wrap angles modulo pi into [-pi/2, pi/2)."""
    return np.mod(np.asarray(angle, dtype=float) + np.pi / 2, np.pi) - np.pi / 2


def parse_pattern(token: str) -> tuple[int, int, int, int]:
    """Parse a row-major 2x2 layout token such as ``"90-45-135-0"``."""
    try:
        angles = tuple(int(p) for p in token.strip().split("-"))
    except ValueError as exc:
        raise ConfigurationError(f"malformed pattern token {token!r}") from exc
    return validate_pattern(angles)


def validate_pattern(pattern) -> tuple[int, int, int, int]:
    pattern = tuple(int(a) for a in pattern)
    if len(pattern) != 4 or sorted(pattern) != sorted(ANALYZER_ANGLES):
        raise ConfigurationError(
            f"pattern must be a permutation of {ANALYZER_ANGLES}, got {pattern}"
        )
    return pattern


def pattern_token(pattern) -> str:
    return "-".join(str(a) for a in pattern)


@dataclass(frozen=True)
class MosaicFrame:
    pixels: np.ndarray
    pattern: tuple[int, int, int, int] = DEFAULT_PATTERN

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise DimensionError(f"mosaic must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "pattern", validate_pattern(self.pattern))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def offset(self, angle: int) -> tuple[int, int]:
        """(row, col) parity position of the given analyzer angle."""
        idx = self.pattern.index(angle)
        return divmod(idx, 2)


@dataclass(frozen=True)
class AnalyzerStack:
    p0: np.ndarray
    p45: np.ndarray
    p90: np.ndarray
    p135: np.ndarray

    def __post_init__(self):
        chans = [np.asarray(c, dtype=float) for c in (self.p0, self.p45, self.p90, self.p135)]
        if any(c.shape != chans[0].shape for c in chans):
            raise DimensionError("analyzer channels differ in shape")
        for name, c in zip(("p0", "p45", "p90", "p135"), chans):
            object.__setattr__(self, name, c)

    def channel(self, angle: int) -> np.ndarray:
        return getattr(self, f"p{angle}")

    @property
    def shape(self):
        return self.p0.shape


@dataclass(frozen=True)
class StokesImage:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray


@dataclass(frozen=True)
class PolarImage:
    """Per-pixel intensity, angle of polarization (radians) and degree."""

    iota: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray
    confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        iota = np.asarray(self.iota, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        rho = np.asarray(self.rho, dtype=float)
        if not (iota.shape == alpha.shape == rho.shape):
            raise DimensionError("iota, alpha and rho differ in shape")
        conf = self.confidence
        conf = np.ones(iota.shape, bool) if conf is None else np.asarray(conf, bool)
        if conf.shape != iota.shape:
            raise DimensionError("confidence shape mismatch")
        object.__setattr__(self, "iota", iota)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "confidence", conf)

    @property
    def shape(self):
        return self.iota.shape

    def crop(self, rows: slice, cols: slice) -> "PolarImage":
        return PolarImage(self.iota[rows, cols], self.alpha[rows, cols],
                          self.rho[rows, cols], self.confidence[rows, cols])


def _interp_axis(sub: np.ndarray, offset: int, n_full: int, axis: int) -> np.ndarray:
    # Sub-grid sample k sits at full-res index offset + 2k; positions outside the
    # sampled span clamp to the nearest sample.
    n_sub = sub.shape[axis]
    pos = (np.arange(n_full) - offset) / 2.0
    pos = np.clip(pos, 0.0, n_sub - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(n_sub - 2, 0))
    hi = np.minimum(lo + 1, n_sub - 1)
    w = pos - lo
    a = np.take(sub, lo, axis=axis)
    b = np.take(sub, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n_full
    w = w.reshape(shape)
    return a * (1.0 - w) + b * w


def demosaic(frame: MosaicFrame) -> AnalyzerStack:
    """Bilinear per-channel demosaicing of a 2x2 polarizer mosaic."""
    h, w = frame.pixels.shape
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")
    if np.any(frame.pixels < 0):
        raise DomainError("negative raw sample in mosaic")
    chans = {}
    for angle in ANALYZER_ANGLES:
        r0, c0 = frame.offset(angle)
        sub = frame.pixels[r0::2, c0::2]
        tmp = _interp_axis(sub, r0, h, axis=0)
        chans[angle] = _interp_axis(tmp, c0, w, axis=1)
    return AnalyzerStack(chans[0], chans[45], chans[90], chans[135])


def mosaic_from_stack(stack: AnalyzerStack, pattern=DEFAULT_PATTERN) -> MosaicFrame:
    """Sample full-resolution analyzer channels onto a mosaic layout."""
    pattern = validate_pattern(pattern)
    h, w = stack.shape
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")
    out = np.empty((h, w))
    for idx, angle in enumerate(pattern):
        r0, c0 = divmod(idx, 2)
        out[r0::2, c0::2] = stack.channel(angle)[r0::2, c0::2]
    return MosaicFrame(out, pattern)


def stokes_from_analyzers(stack: AnalyzerStack) -> StokesImage:
    return StokesImage(
        s0=stack.p0 + stack.p90,
        s1=stack.p0 - stack.p90,
        s2=stack.p45 - stack.p135,
    )


def polar_params(stokes: StokesImage, intensity_stack: AnalyzerStack,
                 convention: str = "standard", eps: float = UNDEFINED_EPS) -> PolarImage:
    """Convert Stokes parameters to (iota, alpha, rho).

    ``convention="standard"`` uses ``0.5 * atan2(s2, s1)`` so that alpha = 0 is
    polarization along the 0-degree analyzer; ``"printed"`` swaps the atan2
    arguments.
    """
    s0, s1, s2 = (np.asarray(s, dtype=float) for s in (stokes.s0, stokes.s1, stokes.s2))
    if not (s0.shape == s1.shape == s2.shape == intensity_stack.shape):
        raise DimensionError("stokes / analyzer shapes differ")
    mag = np.hypot(s1, s2)
    defined = (s0 > eps) & (mag > eps * np.maximum(s0, eps))
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(s0 > eps, mag / np.where(s0 > eps, s0, 1.0), 0.0)
    rho = np.clip(rho, 0.0, 1.0)
    if convention == "standard":
        alpha = 0.5 * np.arctan2(s2, s1)
    elif convention == "printed":
        alpha = 0.5 * np.arctan2(s1, s2)
    else:
        raise ConfigurationError(f"unknown alpha convention {convention!r}")
    alpha = np.where(defined, wrap_half_pi(alpha), 0.0)
    st = intensity_stack
    iota = (st.p0 + st.p45 + st.p90 + st.p135) / 2.0
    return PolarImage(iota=np.maximum(iota, 0.0), alpha=alpha, rho=rho, confidence=defined)


def decode(frame: MosaicFrame, convention: str = "standard") -> PolarImage:
    stack = demosaic(frame)
    return polar_params(stokes_from_analyzers(stack), stack, convention=convention)


def clip_rho(img: PolarImage, max_rho: float = 0.8) -> PolarImage:
    if not (0.0 < max_rho <= 1.0):
        raise ConfigurationError(f"max_rho must lie in (0, 1], got {max_rho}")
    return replace(img, rho=np.minimum(img.rho, max_rho))


def specular_mask(img: PolarImage, threshold: float = 0.4) -> np.ndarray:
    """Pixels whose degree of polarization is trustworthy (rho >= threshold)."""
    return (img.rho >= threshold) & img.confidence


def synthesize_analyzers(img: PolarImage) -> AnalyzerStack:
    """Ideal linear-analyzer intensities for a (iota, alpha, rho) image.

    The analyzer angle is measured in the same frame as alpha, so this is the
    exact inverse of :func:`polar_params` under the standard convention.
    """
    chans = []
    for deg in ANALYZER_ANGLES:
        theta = np.deg2rad(deg)
        chans.append(0.5 * img.iota * (1.0 + img.rho * np.cos(2.0 * (theta - img.alpha))))
    return AnalyzerStack(*chans)
