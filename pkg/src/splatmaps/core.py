"""Cameras, geometry containers and coordinate transforms.

Conventions used across the package:

* world space is right-handed with +z up;
* a camera looks down its own +z axis, +x points right and +y points down
  in the image, so pixel ``(0, 0)`` is the top-left corner;
* pixel centres sit on integer coordinates, i.e. pixel ``(u, v)`` is the
  ray through ``((u - cx) / fx, (v - cy) / fy, 1)`` in camera space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-6


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose.

    ``rotation`` and ``translation`` map a world point ``p`` to camera space
    as ``rotation @ p + translation``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= ORTHO_TOL or np.linalg.det(self.rotation) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            width=d["width"],
            height=d["height"],
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 49.1) -> "Intrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@dataclass
class PointMap:
    values: np.ndarray  # (H, W, 3) world positions
    mask: np.ndarray  # (H, W) bool


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) camera-space z
    mask: np.ndarray  # (H, W) bool


def save_camera(cam: Camera, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2) + "\n")


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


def world_to_camera(p, cam: Camera) -> np.ndarray:
    """Map world points of shape ``(..., 3)`` into camera space."""
    p = np.asarray(p, dtype=np.float64)
    return p @ cam.rotation.T + cam.translation


def camera_to_world(p, cam: Camera) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p - cam.translation) @ cam.rotation


def pixel_grid(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-centre coordinates ``(u, v)``, each of shape ``(H, W)``."""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    return u.astype(np.float64), v.astype(np.float64)


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origin ``(3,)`` and world directions ``(H, W, 3)``.

    Directions are scaled so their camera-space z component is exactly 1,
    hence the ray parameter at a hit equals the camera-space depth.
    """
    u, v = pixel_grid(cam)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    return cam.center, d_cam @ cam.rotation


def pointmap_to_depth(pm: PointMap, cam: Camera) -> DepthMap:
    z = world_to_camera(pm.values, cam)[..., 2]
    mask = np.asarray(pm.mask, dtype=bool) & (z > 0)
    return DepthMap(np.where(mask, z, 0.0), mask)


def depth_to_pointmap(depth: DepthMap, cam: Camera) -> PointMap:
    """Back-project a depth map into world space (inverse of :func:`pointmap_to_depth`)."""
    origin, dirs = camera_rays(cam)
    z = np.where(depth.mask, depth.values, 0.0)
    pts = origin + dirs * z[..., None]
    return PointMap(pts, np.asarray(depth.mask, dtype=bool).copy())


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return rot, -rot @ center


def orbit_camera(azimuth_deg: float, elevation_deg: float, radius: float, intrinsics: Intrinsics) -> Camera:
    """Camera on a sphere around the origin, looking at it with +z up."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if abs(elevation_deg) >= 90.0:
        raise ValueError("elevation of +-90 degrees leaves the up vector undefined")
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    center = radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    rot, trans = look_at(center, np.zeros(3))
    return Camera(
        intrinsics.fx,
        intrinsics.fy,
        intrinsics.cx,
        intrinsics.cy,
        intrinsics.width,
        intrinsics.height,
        rot,
        trans,
    )
