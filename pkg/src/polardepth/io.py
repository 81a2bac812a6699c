"""File formats: float images (PFM), YAML configuration, scene and camera files.

Every writer goes through a temporary file in the destination directory and
an atomic rename, so a failed command never leaves a partial output behind.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError, DimensionError, DomainError, PolarDepthError
from .geometry import CameraIntrinsics, RigidPose
from .losses import LossWeights
from .optimize import OptimizerConfig
from .simulator import Material, Plane, Scene, Sphere, Texture


class FormatError(PolarDepthError, ValueError):
    """A file is malformed or truncated."""


# ---------------------------------------------------------------- atomic writes

@contextmanager
def atomic_path(path):
    """Yield a temporary path next to ``path``; rename onto it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode())


def write_json(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- PFM images

_PFM_HEADER = re.compile(rb"\A(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def encode_pfm(image) -> bytes:
    """Encode a 2-D (``Pf``) or H x W x 3 (``PF``) array, little-endian, bottom row first."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise DimensionError(f"PFM holds 1 or 3 channels, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DomainError("PFM writer rejects NaN and Inf values")
    data = np.ascontiguousarray(arr[::-1], dtype="<f4")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n-1.0\n".encode() + data.tobytes()


def decode_pfm(blob: bytes) -> np.ndarray:
    m = _PFM_HEADER.match(blob)
    if m is None:
        raise FormatError("not a PFM file (bad header)")
    magic, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    channels = 3 if magic == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = blob[m.end():]
    expected = w * h * channels * 4
    if len(body) != expected:
        raise FormatError(f"PFM payload has {len(body)} bytes, expected {expected}")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return arr[::-1].astype(np.float64)


def write_pfm(path, image) -> None:
    write_bytes_atomic(path, encode_pfm(image))


def read_pfm(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_pfm(blob)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- YAML

def _mark(node) -> str:
    m = getattr(node, "start_mark", None)
    return f"line {m.line + 1}, column {m.column + 1}" if m else "unknown position"


def load_yaml(path) -> dict:
    """Parse a YAML mapping; syntax errors report line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise FormatError(f"{path}: {where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise FormatError(f"{path}: line 1, column 1: top level must be a mapping")
    return data


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigurationError(f"{where}: missing key {key!r}")
    return mapping[key]


def _vector(value, n, where):
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: expected {n} numbers") from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ConfigurationError(f"{where}: expected {n} finite numbers")
    return v


# ---------------------------------------------------------------- camera files

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def camera_from_mapping(data, where="camera") -> tuple[CameraIntrinsics, float]:
    unknown = set(data) - set(CAMERA_KEYS) - {"kappa"}
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    vals = {k: _require(data, k, where) for k in CAMERA_KEYS}
    try:
        K = CameraIntrinsics(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]),
                             float(vals["cy"]), int(vals["width"]), int(vals["height"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, PolarDepthError):
            raise
        raise ConfigurationError(f"{where}: {exc}") from exc
    kappa = float(data.get("kappa", 1.0))
    if not kappa > 0:
        raise ConfigurationError(f"{where}: kappa must be positive")
    return K, kappa


def camera_to_mapping(K: CameraIntrinsics, kappa: float = 1.0) -> dict:
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height, "kappa": kappa}


def load_camera(path):
    return camera_from_mapping(load_yaml(path), str(path))


# ---------------------------------------------------------------- scene files

def _texture(data, where) -> Texture:
    if data is None:
        return Texture()
    try:
        if isinstance(data, str):
            return Texture(kind=data)
        return Texture(**dict(data))
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _material(data, where) -> Material:
    data = dict(data or {})
    tex = _texture(data.pop("texture", None), f"{where}.texture")
    try:
        return Material(texture=tex, **data)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def scene_from_mapping(data, where="scene") -> Scene:
    prims = []
    for i, p in enumerate(data.get("primitives") or []):
        loc = f"{where}.primitives[{i}]"
        if not isinstance(p, dict):
            raise ConfigurationError(f"{loc}: expected a mapping")
        kind = _require(p, "type", loc)
        mat = _material(p.get("material"), f"{loc}.material")
        if kind == "plane":
            extent = p.get("extent")
            u_axis = p.get("u_axis")
            prims.append(Plane(_vector(_require(p, "point", loc), 3, f"{loc}.point"),
                               _vector(_require(p, "normal", loc), 3, f"{loc}.normal"), mat,
                               None if extent is None else tuple(_vector(extent, 2, f"{loc}.extent")),
                               None if u_axis is None else _vector(u_axis, 3, f"{loc}.u_axis")))
        elif kind == "sphere":
            prims.append(Sphere(_vector(_require(p, "center", loc), 3, f"{loc}.center"),
                                float(_require(p, "radius", loc)), mat))
        else:
            raise ConfigurationError(f"{loc}: unknown primitive type {kind!r}")
    kwargs = {}
    if "light" in data:
        kwargs["light"] = _vector(data["light"], 3, f"{where}.light")
    for key in ("ambient", "sky_intensity"):
        if key in data:
            kwargs[key] = float(data[key])
    return Scene(prims, **kwargs)


def poses_from_mapping(data, where="poses") -> list[RigidPose]:
    """Either a list of 12-number world-to-camera poses or ``{lateral: baseline, count: n}``."""
    if isinstance(data, dict):
        from .scenes import lateral_track
        return lateral_track(float(data.get("lateral", 0.1)), int(data.get("count", 3)))
    poses = []
    for i, p in enumerate(data or []):
        poses.append(RigidPose.from_flat(_vector(p, 12, f"{where}[{i}]")))
    return poses


def load_scene(path):
    """Scene file: ``primitives``, optional ``light``/``ambient``/``sky_intensity``, optional ``poses``."""
    data = load_yaml(path)
    scene = scene_from_mapping(data, str(path))
    poses = poses_from_mapping(data["poses"], f"{path}:poses") if "poses" in data else None
    return scene, poses


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    camera: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    threads: int = 1
    protocols: tuple = ("raw", "cropped", "specular")
    median_scaling: bool = False
    gt_sky_disp_ceiling: float = 1e-3

    def __post_init__(self):
        if int(self.threads) < 1:
            raise ConfigurationError("threads must be at least 1")
        if int(self.seed) < 0:
            raise ConfigurationError("seed must be non-negative")
        bad = set(self.protocols) - {"raw", "cropped", "specular"}
        if bad or not self.protocols:
            raise ConfigurationError(f"unknown evaluation protocols {sorted(bad)}")
        if not self.gt_sky_disp_ceiling > 0:
            raise ConfigurationError("gt_sky_disp_ceiling must be positive")


CONFIG_SECTIONS = {"camera", "weights", "optimizer", "simulator", "protocol"}


def config_from_mapping(data, overrides=None) -> RunConfig:
    """Build a validated config; ``overrides`` (from flags) win over file values."""
    data = dict(data or {})
    unknown = set(data) - CONFIG_SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    sim = dict(data.get("simulator") or {})
    proto = dict(data.get("protocol") or {})
    bad = set(sim) - {"seed", "threads"}
    bad |= set(proto) - {"protocols", "median_scaling", "gt_sky_disp_ceiling"}
    if bad:
        raise ConfigurationError(f"unknown config keys {sorted(bad)}")
    weights = dict(data.get("weights") or {})
    weights.update(overrides.pop("weights", {}))
    optimizer = dict(data.get("optimizer") or {})
    optimizer.update(overrides.pop("optimizer", {}))
    kwargs = dict(
        camera=dict(data.get("camera") or {}),
        weights=LossWeights.from_mapping(weights),
        optimizer=OptimizerConfig.from_mapping(optimizer),
        seed=int(sim.get("seed", 0)),
        threads=int(sim.get("threads", 1)),
    )
    if "protocols" in proto:
        kwargs["protocols"] = tuple(proto["protocols"])
    for key in ("median_scaling", "gt_sky_disp_ceiling"):
        if key in proto:
            kwargs[key] = proto[key]
    for key in ("seed", "threads", "protocols", "median_scaling", "gt_sky_disp_ceiling"):
        if key in overrides:
            kwargs[key] = overrides[key]
    return RunConfig(**kwargs)


def load_config(path=None, overrides=None) -> RunConfig:
    return config_from_mapping(load_yaml(path) if path else {}, overrides)


def config_to_mapping(cfg: RunConfig) -> dict:
    w = {f.name: getattr(cfg.weights, f.name) for f in fields(cfg.weights)}
    o = {f.name: getattr(cfg.optimizer, f.name) for f in fields(cfg.optimizer)}
    return {"camera": cfg.camera, "weights": w, "optimizer": o,
            "simulator": {"seed": cfg.seed, "threads": cfg.threads},
            "protocol": {"protocols": list(cfg.protocols), "median_scaling": cfg.median_scaling,
                         "gt_sky_disp_ceiling": cfg.gt_sky_disp_ceiling}}
