"""Procedural scenes, an analytic ray-casting renderer and dataset I/O.

Scenes are unions of spheres and axis-aligned boxes with closed-form
textures. The ray caster is exact, so its depth maps serve as ground truth
for everything rendered by the splatting module.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, Intrinsics, camera_rays, load_camera, orbit_camera, save_camera

SCENE_RADIUS = 0.9
CAMERA_RADIUS = 3.0
FOV_DEG = 49.1
INPUT_RIG_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
EVAL_ELEVATIONS = (0.0, 20.0)
TRAIN_ELEVATION_RANGE = (0.0, 30.0)
DEFAULT_RES = 64
DEFAULT_SURFACE_POINTS = 10_000


@dataclass
class Texture:
    kind: str  # "solid" | "checker" | "gradient"
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frequency: float = 1.0  # checker cells per scene unit
    axis: int = 2  # gradient direction

    def evaluate(self, local: np.ndarray, extent: float) -> np.ndarray:
        """Albedo at surface points given in primitive-local coordinates."""
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(a, local.shape[:-1] + (3,)).copy()
        if self.kind == "checker":
            cells = np.floor(local * self.frequency + 1e-9).astype(np.int64).sum(axis=-1)
            return np.where((cells % 2 == 0)[..., None], a, b)
        if self.kind == "gradient":
            s = np.clip(0.5 + 0.5 * local[..., self.axis] / extent, 0.0, 1.0)[..., None]
            return (1 - s) * a + s * b
        raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents
    texture: Texture

    @property
    def extent(self) -> float:
        return float(max(self.size))

    def vertices(self) -> np.ndarray:
        """Corners of the primitive's axis-aligned bounding box."""
        c, s = np.asarray(self.center), np.asarray(self.size)
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
        return c + signs * s


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = [
            Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), Texture(**p["texture"]))
            for p in d["primitives"]
        ]
        return cls(prims, d.get("seed"))


@dataclass
class SceneBundle:
    rgb: np.ndarray  # (V, H, W, 3)
    depth: np.ndarray  # (V, H, W), inf on misses
    alpha: np.ndarray  # (V, H, W)
    cameras: list[Camera]
    surface: np.ndarray  # (N, 3)
    spec: SceneSpec

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def _random_texture(rng: np.random.Generator) -> Texture:
    kind = ["solid", "checker", "gradient"][rng.integers(3)]
    a = tuple(float(v) for v in np.round(rng.uniform(0.1, 0.9, 3), 4))
    b = tuple(float(v) for v in np.round(rng.uniform(0.1, 0.9, 3), 4))
    return Texture(kind, a, b, float(rng.choice([2.0, 3.0, 4.0])), int(rng.integers(3)))


def generate_scene(seed: int) -> SceneSpec:
    """1-4 random primitives inside the ball of radius 0.9 (so inside [-1, 1]^3)."""
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(1, 5))):
        tex = _random_texture(rng)
        if rng.random() < 0.5:
            r = float(np.round(rng.uniform(0.2, 0.5), 4))
            d = rng.normal(size=3)
            c = d / np.linalg.norm(d) * rng.uniform(0, SCENE_RADIUS - r)
            prims.append(Primitive("sphere", tuple(float(v) for v in np.round(c, 4)), (r, r, r), tex))
        else:
            half = np.round(rng.uniform(0.12, 0.4, 3), 4)
            room = SCENE_RADIUS - float(np.linalg.norm(half))
            d = rng.normal(size=3)
            c = d / np.linalg.norm(d) * rng.uniform(0, max(room, 0.0))
            prims.append(
                Primitive("box", tuple(float(v) for v in np.round(c, 4)), tuple(float(v) for v in half), tex)
            )
    return SceneSpec(prims, seed)


def textured_sphere_scene(radius: float = 0.8) -> SceneSpec:
    """Single checker-textured sphere at the origin."""
    tex = Texture("checker", (0.85, 0.55, 0.2), (0.2, 0.35, 0.7), frequency=2.0)
    return SceneSpec([Primitive("sphere", (0.0, 0.0, 0.0), (radius, radius, radius), tex)])


def _intersect_sphere(o, d, center, r):
    oc = o - np.asarray(center)
    a = (d * d).sum(-1)
    b = 2.0 * (d * oc).sum(-1)
    c = float(oc @ oc) - r * r
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where(hit & (t > 0), t, np.inf)


def _intersect_box(o, d, center, half):
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 0), t, np.inf)


def intersect(spec: SceneSpec, origin, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and primitive index along each ray (inf / -1 on miss)."""
    best = np.full(dirs.shape[:-1], np.inf)
    idx = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    o = np.asarray(origin, dtype=np.float64)
    for i, p in enumerate(spec.primitives):
        if p.kind == "sphere":
            t = _intersect_sphere(o, dirs, p.center, p.size[0])
        else:
            t = _intersect_box(o, dirs, p.center, p.size)
        closer = t < best
        best = np.where(closer, t, best)
        idx = np.where(closer, i, idx)
    return best, idx


def shade(spec: SceneSpec, points: np.ndarray, prim_idx: np.ndarray) -> np.ndarray:
    color = np.zeros(points.shape[:-1] + (3,))
    for i, p in enumerate(spec.primitives):
        sel = prim_idx == i
        if sel.any():
            color[sel] = p.texture.evaluate(points[sel] - np.asarray(p.center), p.extent)
    return color


def oracle_render(spec: SceneSpec, cam: Camera):
    """Exact ray-cast render: ``(rgb, depth, alpha)``.

    Depth is camera-space z (``inf`` on misses); alpha is 1 on hits.
    """
    origin, dirs = camera_rays(cam)
    t, idx = intersect(spec, origin, dirs)
    hit = np.isfinite(t)
    pts = origin + dirs * np.where(hit, t, 0.0)[..., None]
    rgb = np.where(hit[..., None], shade(spec, pts, idx), 0.0)
    return rgb, t, hit.astype(np.float64)


def implicit_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Unsigned distance-like residual to the nearest primitive surface (0 on a surface)."""
    best = np.full(points.shape[:-1], np.inf)
    for p in spec.primitives:
        local = points - np.asarray(p.center)
        if p.kind == "sphere":
            res = np.abs(np.linalg.norm(local, axis=-1) - p.size[0])
        else:
            q = np.abs(local) - np.asarray(p.size)
            res = np.abs(np.where((q <= 1e-12).all(-1), q.max(-1), np.linalg.norm(np.maximum(q, 0), axis=-1)))
        best = np.minimum(best, res)
    return best


def _inside_other(spec: SceneSpec, points: np.ndarray, skip: int) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(spec.primitives):
        if i == skip:
            continue
        local = points - np.asarray(p.center)
        if p.kind == "sphere":
            inside |= np.linalg.norm(local, axis=-1) < p.size[0] - 1e-9
        else:
            inside |= (np.abs(local) < np.asarray(p.size) - 1e-9).all(-1)
    return inside


def _area(p: Primitive) -> float:
    if p.kind == "sphere":
        return 4 * math.pi * p.size[0] ** 2
    a, b, c = (2 * s for s in p.size)
    return 2 * (a * b + b * c + a * c)


def _sample_primitive(p: Primitive, k: int, rng) -> np.ndarray:
    c = np.asarray(p.center)
    if p.kind == "sphere":
        d = rng.normal(size=(k, 3))
        return c + p.size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
    h = np.asarray(p.size)
    face_areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
    face = rng.choice(6, size=k, p=face_areas / face_areas.sum())
    pts = rng.uniform(-1, 1, (k, 3)) * h
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(k), axis] = sign * h[axis]
    return c + pts


def sample_surface(spec: SceneSpec, k: int, seed: int) -> np.ndarray:
    """Area-uniform samples on the visible surface of the primitive union."""
    if not spec.primitives:
        raise ValueError("scene has no primitives")
    rng = np.random.default_rng(seed)
    areas = np.array([_area(p) for p in spec.primitives])
    out = []
    need = k
    while need > 0:
        batch = max(2 * need, 64)
        which = rng.choice(len(areas), size=batch, p=areas / areas.sum())
        for i, p in enumerate(spec.primitives):
            n_i = int((which == i).sum())
            if n_i == 0:
                continue
            pts = _sample_primitive(p, n_i, rng)
            out.append(pts[~_inside_other(spec, pts, i)])
        need = k - sum(len(o) for o in out)
    return np.concatenate(out)[:k]


def protocol_views(protocol: str, n_views: int, rng: np.random.Generator | None = None):
    """``(azimuth, elevation)`` pairs in degrees for a capture protocol.

    ``eval16``: the 16-view orbit, azimuths 22.5 degrees apart with
    elevations alternating 0/20, reordered so the four-view input rig
    (azimuths 0/90/180/270 at elevation 0) comes first.
    ``train``: the input rig followed by ``n_views - 4`` random views.
    """
    rig = [(a, 0.0) for a in INPUT_RIG_AZIMUTHS]
    if protocol == "eval16":
        orbit = [(22.5 * k, EVAL_ELEVATIONS[k % 2]) for k in range(16)]
        return rig + [v for v in orbit if v not in rig]
    if protocol == "train":
        if n_views < len(rig):
            raise ValueError("train protocol needs at least the 4 input-rig views")
        rng = rng if rng is not None else np.random.default_rng(0)
        extra = [
            (float(rng.uniform(0, 360)), float(rng.uniform(*TRAIN_ELEVATION_RANGE)))
            for _ in range(n_views - len(rig))
        ]
        return rig + extra
    raise ValueError(f"unknown protocol {protocol!r}")


def render_bundle(
    spec: SceneSpec, views, res: int = DEFAULT_RES, n_surface: int = DEFAULT_SURFACE_POINTS, seed: int = 0
) -> SceneBundle:
    intr = Intrinsics.from_fov(res, res, FOV_DEG)
    cams = [orbit_camera(a, e, CAMERA_RADIUS, intr) for a, e in views]
    renders = [oracle_render(spec, c) for c in cams]
    return SceneBundle(
        np.stack([r[0] for r in renders]),
        np.stack([r[1] for r in renders]),
        np.stack([r[2] for r in renders]),
        cams,
        sample_surface(spec, n_surface, seed),
        spec,
    )


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack_from("<II", raw)
    return np.frombuffer(raw, dtype="<f4", count=h * w, offset=8).reshape(h, w).astype(np.float64)


def write_rgba(path, rgb: np.ndarray, alpha: np.ndarray) -> None:
    img = np.concatenate([rgb, alpha[..., None]], axis=-1)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), "RGBA").save(path, format="PNG")


def read_rgba(path) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    return arr[..., :3], arr[..., 3]


def write_bundle(bundle: SceneBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(bundle.cameras):
        write_rgba(d / f"view_{k}.png", bundle.rgb[k], bundle.alpha[k])
        write_depth(d / f"view_{k}.depth", bundle.depth[k])
        save_camera(cam, d / f"view_{k}.cam")
    np.savetxt(d / "surface.xyz", bundle.surface, fmt="%.9g")
    (d / "spec.json").write_text(bundle.spec.to_json())


def load_bundle(directory) -> SceneBundle:
    """Read a scene directory back; rgb/alpha are 8-bit quantised, depth float32."""
    d = Path(directory)
    n = len(list(d.glob("view_*.cam")))
    if n == 0:
        raise FileNotFoundError(f"no views found in {d}")
    rgbs, alphas, depths, cams = [], [], [], []
    for k in range(n):
        rgb, a = read_rgba(d / f"view_{k}.png")
        rgbs.append(rgb)
        alphas.append(a)
        depths.append(read_depth(d / f"view_{k}.depth"))
        cams.append(load_camera(d / f"view_{k}.cam"))
    surface = np.loadtxt(d / "surface.xyz", ndmin=2)
    spec = SceneSpec.from_dict(json.loads((d / "spec.json").read_text()))
    return SceneBundle(np.stack(rgbs), np.stack(depths), np.stack(alphas), cams, surface, spec)


def make_dataset(
    out_dir,
    n_scenes: int,
    views_per_scene: int = 8,
    protocol: str = "train",
    res: int = DEFAULT_RES,
    seed: int = 0,
    n_surface: int = DEFAULT_SURFACE_POINTS,
) -> list[Path]:
    """Write ``scene_<id>/`` directories; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        spec = generate_scene(int(rng.integers(2**31)))
        views = protocol_views(protocol, views_per_scene, rng)
        bundle = render_bundle(spec, views, res, n_surface, seed=int(rng.integers(2**31)))
        path = out / f"scene_{i}"
        write_bundle(bundle, path)
        paths.append(path)
    manifest = {"protocol": protocol, "scenes": n_scenes, "views": len(views), "res": res, "seed": seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return paths
