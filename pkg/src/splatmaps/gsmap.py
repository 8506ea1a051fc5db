"""Per-pixel Gaussian maps and the Gaussian sets they merge into.

A GS-map stores one 3D Gaussian per pixel in 14 channels, ordered
``[px, py, pz, sx, sy, sz, qw, qx, qy, qz, opacity, r, g, b]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

N_CHANNELS = 14
POS = slice(0, 3)
SCALE = slice(3, 6)
ROT = slice(6, 10)
OPACITY = slice(10, 11)
COLOR = slice(11, 14)

SCALE_COEF = 0.1
QUAT_EPS = 1e-8
# keep activated values strictly inside their open ranges once sigmoid or
# softplus saturates in floating point
UNIT_EPS = 1e-6
SCALE_MIN = 1e-12
SH_C0 = 0.28209479177387814

GSMAP_MAGIC = b"GSMP"
GSMAP_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DegenerateRotationError(ValueError):
    """A valid pixel carries a (near) zero quaternion."""


class EmptyGaussianSetError(ValueError):
    pass


class GsMapFormatError(ValueError):
    pass


class BadMagicError(GsMapFormatError):
    pass


class VersionMismatchError(GsMapFormatError):
    pass


class TruncatedPayloadError(GsMapFormatError):
    pass


def _check_layout(values, mask):
    if values.ndim != 4 or values.shape[-1] != N_CHANNELS:
        raise ValueError(f"expected (views, H, W, {N_CHANNELS}) values, got {values.shape}")
    if mask.shape != values.shape[:3]:
        raise ValueError(f"mask shape {mask.shape} does not match values {values.shape[:3]}")


@dataclass
class RawGsMap:
    """Pre-activation network output."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        _check_layout(self.values, self.mask)
        if not np.isfinite(self.values).all():
            raise ValueError("raw GS-map contains non-finite values")


@dataclass
class GsMap:
    """Activated GS-map; see :meth:`check` for the per-pixel invariants."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        _check_layout(self.values, self.mask)

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def check(self, quat_tol: float = 1e-6) -> None:
        """Raise ``ValueError`` if any valid pixel breaks an activated-map invariant."""
        v = self.values[self.mask].astype(np.float64)
        if not np.isfinite(v).all():
            raise ValueError("non-finite GS-map values")
        if (np.abs(v[:, POS]) > 1.0).any():
            raise ValueError("position outside [-1, 1]^3")
        if (v[:, SCALE] <= 0).any():
            raise ValueError("non-positive scale")
        if (np.abs(np.linalg.norm(v[:, ROT], axis=1) - 1.0) > quat_tol).any():
            raise ValueError("quaternion not unit norm")
        for name, sl in (("opacity", OPACITY), ("color", COLOR)):
            if ((v[:, sl] <= 0) | (v[:, sl] >= 1)).any():
                raise ValueError(f"{name} outside (0, 1)")


@dataclass
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of world-space Gaussians."""

    means: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) w, x, y, z
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not all(len(a) == n for a in (self.scales, self.quats, self.opacities, self.colors)):
            raise ValueError("Gaussian attribute arrays differ in length")

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(
            self.means[i], self.scales[i], self.quats[i], float(self.opacities[i]), self.colors[i]
        )

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            np.stack([g.mean for g in gs]),
            np.stack([g.scale for g in gs]),
            np.stack([g.rotation for g in gs]),
            np.array([g.opacity for g in gs]),
            np.stack([g.color for g in gs]),
        )

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "GaussianSet":
        """Build from activated 14-channel rows."""
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, N_CHANNELS)
        return cls(rows[:, POS], rows[:, SCALE], rows[:, ROT], rows[:, 10], rows[:, COLOR])

    def to_rows(self) -> np.ndarray:
        return np.concatenate(
            [self.means, self.scales, self.quats, self.opacities[:, None], self.colors], axis=1
        )


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate(raw: RawGsMap) -> GsMap:
    """Map raw network channels to valid Gaussian parameters.

    Positions are hard-clamped to ``[-1, 1]``, opacity and colour go through
    a sigmoid, quaternions are L2-normalised and scales become
    ``0.1 * softplus(x)``. Invalid (masked-out) pixels are activated too but
    a near-zero quaternion there is tolerated.
    """
    v = np.asarray(raw.values, dtype=np.float64)
    out = np.empty_like(v)
    out[..., POS] = np.clip(v[..., POS], -1.0, 1.0)
    out[..., SCALE] = np.maximum(SCALE_COEF * softplus(v[..., SCALE]), SCALE_MIN)
    q = v[..., ROT]
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    bad = (norm[..., 0] < QUAT_EPS) & raw.mask
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DegenerateRotationError(f"near-zero quaternion at valid pixel (view, row, col) = {idx}")
    safe = np.where(norm < QUAT_EPS, 1.0, norm)
    out[..., ROT] = np.where(norm < QUAT_EPS, np.array([1.0, 0, 0, 0]), q / safe)
    out[..., OPACITY] = np.clip(sigmoid(v[..., OPACITY]), UNIT_EPS, 1 - UNIT_EPS)
    out[..., COLOR] = np.clip(sigmoid(v[..., COLOR]), UNIT_EPS, 1 - UNIT_EPS)
    return GsMap(out, raw.mask.copy())


def activate_tensor(raw: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable :func:`activate` for ``(..., 14)`` tensors.

    Without ``mask`` every pixel counts as valid, so any near-zero
    quaternion raises :class:`DegenerateRotationError`.
    """
    q = raw[..., ROT]
    norm = q.norm(dim=-1, keepdim=True)
    small = norm[..., 0] < QUAT_EPS
    bad = small if mask is None else small & mask
    if bool(bad.any()):
        raise DegenerateRotationError("near-zero quaternion at a valid pixel")
    ident = torch.zeros_like(q)
    ident[..., 0] = 1.0
    rot = torch.where(small[..., None], ident, q / torch.where(small[..., None], torch.ones_like(norm), norm))
    return torch.cat(
        [
            raw[..., POS].clamp(-1.0, 1.0),
            (SCALE_COEF * torch.nn.functional.softplus(raw[..., SCALE])).clamp_min(SCALE_MIN),
            rot,
            torch.sigmoid(raw[..., OPACITY]).clamp(UNIT_EPS, 1 - UNIT_EPS),
            torch.sigmoid(raw[..., COLOR]).clamp(UNIT_EPS, 1 - UNIT_EPS),
        ],
        dim=-1,
    )


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` from unit quaternions ``(..., 4)`` in w, x, y, z order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance(s, q) -> np.ndarray:
    """``R(q) diag(s)^2 R(q)^T`` for scales ``(..., 3)`` and unit quaternions ``(..., 4)``."""
    m = quat_to_rotmat(q) * np.asarray(s, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def merge(maps) -> GaussianSet:
    """Concatenate the valid pixels of several GS-maps, view-major then row-major.

    ``maps`` is a single multi-view :class:`GsMap` or a sequence of them.
    """
    if isinstance(maps, GsMap):
        maps = [maps]
    maps = list(maps)
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise ValueError(f"GS-maps disagree on resolution: {sorted(shapes)}")
    rows = [m.values[m.mask] for m in maps]
    rows = np.concatenate(rows, axis=0) if rows else np.zeros((0, N_CHANNELS))
    if len(rows) == 0:
        raise EmptyGaussianSetError("no valid pixels to merge")
    return GaussianSet.from_rows(rows)


_PLY_FIELDS = (
    ["x", "y", "z", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
)


def export_ply(gs: GaussianSet, path) -> None:
    """Write a binary little-endian PLY readable by common 3DGS viewers.

    Opacity is stored as a logit, scales as natural logs and colour as the
    degree-0 spherical-harmonic coefficient ``(c - 0.5) / C0``.
    """
    if len(gs) == 0:
        raise EmptyGaussianSetError("cannot export an empty Gaussian set")
    dtype = np.dtype([(name, "<f4") for name in _PLY_FIELDS])
    data = np.empty(len(gs), dtype=dtype)
    for i, name in enumerate("xyz"):
        data[name] = gs.means[:, i]
    data["opacity"] = logit(gs.opacities)
    for i in range(3):
        data[f"scale_{i}"] = np.log(gs.scales[:, i])
        data[f"f_dc_{i}"] = (gs.colors[:, i] - 0.5) / SH_C0
    for i in range(4):
        data[f"rot_{i}"] = gs.quats[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gs)}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def import_ply(path) -> GaussianSet:
    """Read a PLY written by :func:`export_ply`."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError("not a binary little-endian PLY file")
    count = next(int(line.split()[-1]) for line in lines if line.startswith("element vertex"))
    names = [line.split()[-1] for line in lines if line.startswith("property")]
    data = np.frombuffer(raw[end:], dtype=np.dtype([(n, "<f4") for n in names]), count=count)

    def cols(*keys):
        return np.stack([data[k].astype(np.float64) for k in keys], axis=1)

    quats = cols("rot_0", "rot_1", "rot_2", "rot_3")
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(
        cols("x", "y", "z"),
        np.exp(cols("scale_0", "scale_1", "scale_2")),
        quats,
        sigmoid(data["opacity"].astype(np.float64)),
        cols("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5,
    )


def save_gsmap(gsmap, path) -> None:
    """Write the binary GS-map container (values stored as float32)."""
    values = np.ascontiguousarray(gsmap.values, dtype="<f4")
    n, h, w, _ = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(GSMAP_MAGIC, GSMAP_VERSION, n, h, w))
        f.write(values.tobytes())
        f.write(np.ascontiguousarray(gsmap.mask, dtype=np.uint8).tobytes())


def load_gsmap(path) -> GsMap:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != GSMAP_MAGIC:
        raise BadMagicError(f"{path}: not a GS-map file (bad magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, h, w = _HEADER.unpack_from(raw)
    if version != GSMAP_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {GSMAP_VERSION}")
    count = n * h * w
    need = _HEADER.size + count * N_CHANNELS * 4 + count
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    values = np.frombuffer(raw, dtype="<f4", count=count * N_CHANNELS, offset=off)
    mask = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off + count * N_CHANNELS * 4)
    return GsMap(values.reshape(n, h, w, N_CHANNELS).astype(np.float32), mask.reshape(n, h, w).astype(bool))
