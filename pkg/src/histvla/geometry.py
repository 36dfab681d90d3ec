"""Pinhole back-projection and spatially-augmented visual tokens.

Frame conventions
-----------------
* Camera frame: x right, y down, z along the optical axis (depth).
* Ego frame: x forward, y left, z up, origin at the ego reference point.

A camera-to-ego :class:`Extrinsics` maps camera-frame points into the ego
frame as ``R @ p + t``. Yaw rotations about ego z are counter-clockwise, so
a +90 degree yaw sends ego (1, 0, 0) to (0, 1, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

MAX_WAVELENGTH = 100.0  # [m]


class InvalidInputError(ValueError):
    """Raised when numeric inputs violate an operation's preconditions."""


class ConfigError(ValueError):
    """Raised when a configuration or model dimension is inconsistent."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.image_w and 0 <= self.cy < self.image_h):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, hfov_deg: float, image_w: int, image_h: int) -> "CameraIntrinsics":
        f = 0.5 * image_w / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(f, f, image_w / 2.0, image_h / 2.0, image_w, image_h)


@dataclass(frozen=True)
class Extrinsics:
    """Rigid camera-to-ego transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ConfigError("rotation must be 3x3 and translation a 3-vector")
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-9:
            raise ConfigError("extrinsic rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def camera_looking_along(cls, yaw: float, height: float = 1.5) -> "Extrinsics":
        """Camera mounted at ``height`` above the ego origin, optical axis yawed by ``yaw`` rad."""
        # optical axes -> ego axes for an unrotated forward camera
        base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        return cls(yaw_matrix(yaw) @ base, np.array([0.0, 0.0, height]))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInputError("depth map must be a 2-D grid")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise InvalidInputError("depth values must be positive and finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PatchFeatures:
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise InvalidInputError("patch features must have shape (rows, cols, d_model)")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("patch features must be finite")
        object.__setattr__(self, "features", f)


class SpatialToken(NamedTuple):
    feature: np.ndarray
    position: np.ndarray
    source: tuple[int, int, int]


def back_project(pixel, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel with known metric depth to a camera-frame 3-D point."""
    u, v = float(pixel[0]), float(pixel[1])
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidInputError(f"depth must be positive and finite, got {depth}")
    if not (0 <= u <= k.image_w and 0 <= v <= k.image_h):
        raise InvalidInputError(f"pixel ({u}, {v}) outside the {k.image_w}x{k.image_h} image")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def back_project_grid(u: np.ndarray, v: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Vectorised :func:`back_project`; returns ``(..., 3)``."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise InvalidInputError("depth must be positive and finite")
    return np.stack([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth], axis=-1)


def project(point, k: CameraIntrinsics) -> np.ndarray:
    x, y, z = point
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def to_ego_frame(point, extrinsics: Extrinsics) -> np.ndarray:
    """Apply the camera-to-ego rigid transform. Accepts ``(3,)`` or ``(n, 3)``."""
    p = np.asarray(point, dtype=np.float64)
    return p @ extrinsics.rotation.T + extrinsics.translation


def patch_centers(rows: int, cols: int, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(u, v)`` of the centres of a ``rows x cols`` patch grid."""
    u = (np.arange(cols) + 0.5) * k.image_w / cols
    v = (np.arange(rows) + 0.5) * k.image_h / rows
    return np.meshgrid(u, v)


def band_frequencies(d_model: int) -> np.ndarray:
    if d_model % 6:
        raise ConfigError(f"d_model must be divisible by 6, got {d_model}")
    n = d_model // 6
    return 2.0 * np.pi / (MAX_WAVELENGTH / 2.0 ** np.arange(n))


def sinusoidal_features(points, d_model: int) -> np.ndarray:
    """Interleaved (sin, cos) bands for x, then y, then z.

    Each axis gets ``d_model // 6`` wavelengths ``100 m / 2**j``.
    """
    omega = band_frequencies(d_model)
    p = np.asarray(points, dtype=np.float64)
    angles = p[..., :, None] * omega  # (..., 3, n)
    out = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., 3, n, 2)
    return out.reshape(*p.shape[:-1], d_model)


class PositionEncoder(nn.Module):
    """Sinusoidal featurisation followed by a two-layer perceptron of width ``d_model``."""

    def __init__(self, d_model: int):
        super().__init__()
        band_frequencies(d_model)  # validates divisibility
        self.d_model = d_model
        self.register_buffer("omega", torch.from_numpy(band_frequencies(d_model)).float())
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def featurize(self, points: torch.Tensor) -> torch.Tensor:
        angles = points[..., :, None] * self.omega.to(points.dtype)
        out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
        return out.reshape(*points.shape[:-1], self.d_model)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(self.featurize(points))))

    def zero_(self) -> "PositionEncoder":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def encode_position(point, d_model: int, encoder: PositionEncoder | None = None) -> np.ndarray:
    """Encode one or more ego-frame points into ``d_model`` vectors.

    Without an ``encoder`` a freshly seeded one is used, so the result is
    deterministic for a given ``d_model``.
    """
    if encoder is None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(0)
        encoder = PositionEncoder(d_model)
        torch.random.set_rng_state(gen_state)
    if encoder.d_model != d_model:
        raise ConfigError("encoder width does not match d_model")
    with torch.no_grad():
        dtype = next(encoder.parameters()).dtype
        p = torch.as_tensor(np.asarray(point, dtype=np.float64), dtype=dtype)
        return encoder(p).double().numpy()


def augment_tokens(
    features: PatchFeatures,
    depth: DepthMap,
    k: CameraIntrinsics,
    extrinsics: Extrinsics,
    encoder: PositionEncoder | None = None,
    view: int = 0,
) -> list[SpatialToken]:
    """Add encoded ego-frame patch positions to raw patch features.

    Positional encodings go onto the raw features, before any normalisation.
    """
    feats = features.features
    rows, cols, d_model = feats.shape
    if depth.values.shape != (rows, cols):
        raise InvalidInputError(
            f"feature grid {rows}x{cols} does not match depth grid {depth.values.shape}"
        )
    u, v = patch_centers(rows, cols, k)
    cam = back_project_grid(u, v, depth.values, k)
    ego = to_ego_frame(cam.reshape(-1, 3), extrinsics)
    enc = encode_position(ego, d_model, encoder)
    flat = feats.reshape(-1, d_model)
    return [
        SpatialToken(flat[i] + enc[i], ego[i], (view, i // cols, i % cols))
        for i in range(rows * cols)
    ]
