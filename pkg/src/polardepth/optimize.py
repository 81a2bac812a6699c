"""Direct descent on the disparity field, plus finite-difference gradient checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

from .errors import ConfigurationError, DimensionError, NumericalError
from .geometry import CameraIntrinsics, DisparityMap
from .losses import LossWeights, total_loss
from .polar import PolarImage

TERMS = ("L_r", "L_s", "L_pol", "Lambda")
TERMINATIONS = ("converged", "max_iter", "diverged")


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 1e-2
    max_iterations: int = 2000
    convergence_tol: float = 1e-7
    convergence_window: int = 20
    gradient_clip: float = 1e3
    disparity_floor: float = 1e-4
    line_search: bool = False
    armijo_c: float = 1e-4
    max_halvings: int = 30
    divergence_factor: float = 10.0

    def __post_init__(self):
        for name in ("step_size", "convergence_tol", "gradient_clip", "disparity_floor",
                     "armijo_c", "divergence_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("max_iterations", "convergence_window", "max_halvings"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")

    @classmethod
    def from_mapping(cls, data) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown optimizer keys: {sorted(extra)}")
        return cls(**dict(data))


@dataclass
class OptimizationTrace:
    Lambda: list = field(default_factory=list)
    L_r: list = field(default_factory=list)
    L_s: list = field(default_factory=list)
    L_pol: list = field(default_factory=list)
    iterations_run: int = 0
    terminated_by: str = "max_iter"
    best_iteration: int = 0

    def record(self, breakdown) -> None:
        self.Lambda.append(breakdown.Lambda)
        self.L_r.append(breakdown.L_r)
        self.L_s.append(breakdown.L_s)
        self.L_pol.append(breakdown.L_pol)
        self.iterations_run += 1

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.Lambda))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "Lambda", "L_r", "L_s", "L_pol"])
        for i in range(self.iterations_run):
            writer.writerow([i, repr(self.Lambda[i]), repr(self.L_r[i]),
                             repr(self.L_s[i]), repr(self.L_pol[i])])
        return buf.getvalue()


def _loss_value(result) -> float:
    return float(getattr(result, "Lambda", result))


def numeric_gradient(loss, disp: DisparityMap, h: float, pixels=None) -> np.ndarray:
    """Central differences of ``loss(DisparityMap)`` one pixel at a time.

    ``loss`` may return a float or anything with a ``Lambda`` attribute.
    Only ``pixels`` (default: every valid pixel) are visited; the rest stay 0.
    """
    if not h > 0:
        raise ConfigurationError("finite-difference step must be positive")
    base = _loss_value(loss(disp))
    if not np.isfinite(base):
        raise NumericalError("loss is not finite at the expansion point")
    grad = np.zeros(disp.shape)
    if pixels is None:
        pixels = np.argwhere(disp.valid)
    vals = disp.values
    for v, u in pixels:
        x = vals.copy()
        x[v, u] += h
        up = _loss_value(loss(disp.with_values(x)))
        x[v, u] -= 2 * h
        dn = _loss_value(loss(disp.with_values(x)))
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericalError(f"loss not finite near pixel {(int(v), int(u))}")
        grad[v, u] = (up - dn) / (2 * h)
    return grad


def smooth_perturbation(rng: np.random.Generator, shape, amplitude: float = 3e-3,
                        coarse: int = 8) -> np.ndarray:
    """Band-limited relative perturbation: cubic upsampling of coarse Gaussian noise.

    Gives the disparity field curvature (so second differences are away from
    their kink at zero) without randomizing the local normals.
    """
    h, w = shape
    c = rng.standard_normal((coarse, coarse))
    return amplitude * zoom(c, (h / coarse, w / coarse), order=3)[:h, :w]


@dataclass
class GradientCheckReport:
    max_rel_error: dict
    plain_max_rel_error: dict
    checked: int
    excluded: int
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def table(self) -> str:
        lines = [f"{'term':<8}{'richardson':>14}{'central':>14}",
                 *(f"{t:<8}{self.max_rel_error[t]:>14.3e}{self.plain_max_rel_error[t]:>14.3e}"
                   for t in self.max_rel_error),
                 f"checked {self.checked} smooth pixels, excluded {self.excluded} non-smooth"]
        return "\n".join(lines)


def _rel_error(a: float, n: float, floor: float) -> float | None:
    m = max(abs(a), abs(n))
    return abs(a - n) / m if m > floor else None


def gradient_check(target, sources, disp: DisparityMap, polar: PolarImage, K: CameraIntrinsics,
                   w: LossWeights = LossWeights(), h_rel: float = 1e-4, floor: float = 1e-8,
                   tolerance: float = 1e-4) -> GradientCheckReport:
    """Compare analytic d(term)/dD with finite differences on every smooth pixel.

    The step is ``h = h_rel * mean(D)``. A pixel is skipped as non-smooth when
    any discrete state (min-selection, masks, interpolation cells, absolute
    value signs, tangent clamp) differs between the expansion point and any
    of the perturbed evaluations. The pass/fail errors use Richardson
    extrapolation of central differences at ``h`` and ``h/2``; plain central
    differences at ``h`` are reported alongside.
    """
    base = total_loss(target, sources, disp, polar, K, w)
    if not np.isfinite(base.Lambda):
        raise NumericalError("loss is not finite at the expansion point")
    h = h_rel * float(disp.values[disp.valid].mean())
    vals = disp.values

    def evaluate(v, u, step):
        out = []
        for sign in (1.0, -1.0):
            x = vals.copy()
            x[v, u] += sign * step
            out.append(total_loss(target, sources, disp.with_values(x), polar, K, w,
                                  with_gradient=False))
        return out

    rich = {t: 0.0 for t in TERMS}
    plain = {t: 0.0 for t in TERMS}
    checked = excluded = 0
    for v, u in np.argwhere(disp.valid):
        evals = evaluate(v, u, h) + evaluate(v, u, h / 2)
        if any(not np.array_equal(e.state[k], base.state[k]) for e in evals for k in base.state):
            excluded += 1
            continue
        checked += 1
        for t in TERMS:
            up, dn, up2, dn2 = (getattr(e, t) for e in evals)
            g1 = (up - dn) / (2 * h)
            g2 = (up2 - dn2) / h
            a = base.term_gradients[t][v, u]
            for store, g in ((plain, g1), (rich, (4 * g2 - g1) / 3)):
                err = _rel_error(a, g, floor)
                if err is not None:
                    store[t] = max(store[t], err)
    return GradientCheckReport(rich, plain, checked, excluded, tolerance)


def _descend(x, g, step, valid, floor):
    return np.where(valid, np.maximum(x - step * g, floor), x)


def refine_depth(initial: DisparityMap, target, sources, polar: PolarImage, K: CameraIntrinsics,
                 w: LossWeights = LossWeights(), cfg: OptimizerConfig = OptimizerConfig(),
                 callback=None):
    """Projected gradient descent on ``Lambda`` over the disparity values.

    Each step clips the gradient elementwise to ``+-gradient_clip`` and
    projects onto ``[disparity_floor, inf)``; invalid pixels never move.
    Returns the iterate with the lowest recorded ``Lambda`` and the trace.
    """
    if initial.shape != K.shape:
        raise DimensionError("initial disparity and camera sizes differ")
    valid = initial.valid
    if np.any(initial.values[valid] < cfg.disparity_floor):
        raise ConfigurationError("initial disparity below the configured floor")
    x = initial.values.copy()
    trace = OptimizationTrace()
    current = total_loss(target, sources, initial, polar, K, w)
    if not np.isfinite(current.Lambda):
        raise NumericalError("loss is not finite at the initial disparity")
    lambda0 = current.Lambda
    best_x, best_val = x.copy(), current.Lambda
    trace.record(current)
    trace.terminated_by = "max_iter"

    while trace.iterations_run < cfg.max_iterations:
        g = np.clip(current.gradient, -cfg.gradient_clip, cfg.gradient_clip)
        step = cfg.step_size
        x_new = _descend(x, g, step, valid, cfg.disparity_floor)
        nxt = total_loss(target, sources, initial.with_values(x_new), polar, K, w)
        if cfg.line_search:
            halvings = 0
            while not (np.isfinite(nxt.Lambda) and
                       nxt.Lambda <= current.Lambda + cfg.armijo_c * np.sum(g * (x_new - x))):
                halvings += 1
                if halvings > cfg.max_halvings:
                    break
                step /= 2
                x_new = _descend(x, g, step, valid, cfg.disparity_floor)
                nxt = total_loss(target, sources, initial.with_values(x_new), polar, K, w)
            if halvings > cfg.max_halvings:
                trace.terminated_by = "converged"
                break
        x, current = x_new, nxt
        if not np.isfinite(current.Lambda):
            trace.terminated_by = "diverged"
            break
        trace.record(current)
        if current.Lambda < best_val:
            best_x, best_val = x.copy(), current.Lambda
            trace.best_iteration = trace.iterations_run - 1
        if callback is not None:
            callback(trace.iterations_run - 1, current, x)
        if lambda0 > 0 and current.Lambda > cfg.divergence_factor * lambda0:
            trace.terminated_by = "diverged"
            break
        k = cfg.convergence_window
        if trace.iterations_run > k:
            best = np.minimum.accumulate(trace.Lambda[-k - 1:])
            if best[0] > 0 and (best[0] - best[-1]) / best[0] < cfg.convergence_tol:
                trace.terminated_by = "converged"
                break
    return initial.with_values(best_x), trace
