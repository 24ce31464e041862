"""Procedural scenes, trajectory synthesis, and tracking metrics.

Scenes are described by a line-based ``key = value`` text format (grammar
below) listing colored box/sphere primitives for a background field and a
textured object.  Object primitives get a per-face checker texture whose
cells are rectangular (no 90-degree self-similarity) and carry a
deterministic per-cell tint, so patch descriptors are distinctive and
feature-metric alignment always has gradients to work with.

Scene grammar (``#`` comments, blank lines ignored)::

    bbox = x0 y0 z0 x1 y1 z1          object field bounds
    resolution = n                     object grid nodes per axis
    camera = fx fy cx cy w h
    object.box = cx cy cz sx sy sz r g b [density]
    object.sphere = cx cy cz radius r g b [density]
    background.box / background.sphere = ... (same shapes)
    background.bbox = x0 y0 z0 x1 y1 z1   (optional; default 4x object)
    background.resolution = n             (optional; default = resolution)

Trajectories use the same line format with ``kind``, ``frames``, ``seed``,
``noise``, per-kind magnitudes (``rate_deg``, ``elevation_deg``,
``azimuth_deg``, ``distance``, ``rot_deg``, ``trans_frac``) and an
optional ``occlude = first last`` frame range rendered without the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from importlib import resources

import numpy as np

from voxtrack import coldstart as cs
from voxtrack import field as fd
from voxtrack.geometry import (
    Camera,
    Pose,
    compose,
    exp,
    inverse,
    look_at,
    relative_rotation_angle,
    transform_points,
)

OBJECT_DENSITY_DEFAULT = 300.0
BACKGROUND_DENSITY_DEFAULT = 120.0


class SpecParse(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class LengthMismatch(ValueError):
    """Estimate and ground-truth sequences have different lengths."""


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------

FACE_PALETTE = np.array(
    [
        [0.90, 0.30, 0.20],  # +x
        [0.20, 0.45, 0.90],  # -x
        [0.25, 0.75, 0.30],  # +y
        [0.85, 0.75, 0.20],  # -y
        [0.75, 0.35, 0.80],  # +z
        [0.25, 0.70, 0.70],  # -z
    ]
)
CHECKER_ALT = np.array([0.95, 0.92, 0.85])
CELL_ASPECT = 1.6  # rectangular cells: no 90-degree self-similarity
TINT_STRENGTH = 0.45


def _cell_tint(ia: np.ndarray, ib: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Deterministic per-cell RGB tint from hashed cell indices."""
    h = (
        ia.astype(np.uint64) * np.uint64(0x9E3779B1)
        ^ ib.astype(np.uint64) * np.uint64(0x85EBCA6B)
        ^ (face.astype(np.uint64) + np.uint64(1)) * np.uint64(0xC2B2AE35)
    )
    out = np.empty(ia.shape + (3,), dtype=np.float64)
    for c in range(3):
        h = (h * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)) & np.uint64(
            0xFFFFFFFFFFFFFFFF
        )
        out[..., c] = ((h >> np.uint64(40)) & np.uint64(0xFFFFFF)).astype(np.float64) / float(
            0xFFFFFF
        )
    return out


def face_checker_colors(rel: np.ndarray, base: np.ndarray | None, cell: float) -> np.ndarray:
    """Texture colors for points at positions ``rel`` relative to a box
    center, normalized by the half-sizes (so faces are found by the
    dominant coordinate).  ``base`` tints the face palette when given."""
    dominant = np.abs(rel).argmax(axis=-1)
    sign_neg = np.take_along_axis(rel, dominant[..., None], axis=-1)[..., 0] < 0
    face = dominant * 2 + sign_neg
    others = np.array([[1, 2], [0, 2], [0, 1]])
    a = np.take_along_axis(rel, others[dominant][..., 0][..., None], axis=-1)[..., 0]
    b = np.take_along_axis(rel, others[dominant][..., 1][..., None], axis=-1)[..., 0]
    ia = np.floor(a / cell + 0.13 * face).astype(np.int64)
    ib = np.floor(b / (CELL_ASPECT * cell) + 0.29 * face).astype(np.int64)
    phase = ((ia + ib) % 2).astype(bool)
    palette = FACE_PALETTE
    if base is not None:
        palette = 0.35 * np.asarray(base, dtype=np.float64)[None, :] + 0.65 * FACE_PALETTE
    cols = palette[face]
    cols[phase] = CHECKER_ALT
    tint = _cell_tint(ia, ib, face)
    return (1.0 - TINT_STRENGTH) * cols + TINT_STRENGTH * tint


def paint_face_checker(f: fd.VoxelField, cell: float = 0.28, base=None) -> None:
    """Paint an entire field with the per-face checker (test helper and
    single-box fast path); faces are assigned around the bbox center."""
    ax = [np.linspace(f.bbox_min[i], f.bbox_max[i], f.resolution[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    center = 0.5 * (f.bbox_min + f.bbox_max)
    half = np.maximum(0.5 * (f.bbox_max - f.bbox_min), 1e-9)
    rel = (np.stack([gx, gy, gz], axis=-1) - center) / half
    cols = face_checker_colors(rel * half, base, cell)
    f.color_raw = fd.sigmoid_inverse(cols).astype(np.float32)
    f.invalidate()


# ---------------------------------------------------------------------------
# primitives and rasterization
# ---------------------------------------------------------------------------

@dataclass
class BoxPrimitive:
    center: np.ndarray
    size: np.ndarray  # full side lengths
    color: np.ndarray
    density: float
    textured: bool = False

    def aabb(self):
        return self.center - 0.5 * self.size, self.center + 0.5 * self.size

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (np.abs(pts - self.center) <= 0.5 * self.size + 1e-12).all(axis=-1)

    def color_at(self, pts: np.ndarray) -> np.ndarray:
        if not self.textured:
            return np.broadcast_to(self.color, pts.shape).copy()
        rel = (pts - self.center) / np.maximum(0.5 * self.size, 1e-9)
        return face_checker_colors(rel * np.maximum(0.5 * self.size, 1e-9), self.color, cell=0.28)


@dataclass
class SpherePrimitive:
    center: np.ndarray
    radius: float
    color: np.ndarray
    density: float
    textured: bool = False

    def aabb(self):
        r = np.full(3, self.radius)
        return self.center - r, self.center + r

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - self.center, axis=-1) <= self.radius + 1e-12

    def color_at(self, pts: np.ndarray) -> np.ndarray:
        if not self.textured:
            return np.broadcast_to(self.color, pts.shape).copy()
        rel = (pts - self.center) / max(self.radius, 1e-9)
        return face_checker_colors(rel, self.color, cell=0.4)


def rasterize(primitives, bbox_min, bbox_max, resolution) -> fd.VoxelField:
    """Analytic voxelization: later primitives win where they overlap."""
    f = fd.VoxelField.empty(bbox_min, bbox_max, resolution)
    nx, ny, nz = f.resolution
    ax = [np.linspace(f.bbox_min[i], f.bbox_max[i], f.resolution[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    draw = np.full(nx * ny * nz, -np.inf, dtype=np.float64)
    craw = np.zeros((nx * ny * nz, 3), dtype=np.float64)
    for prim in primitives:
        inside = prim.contains(pts)
        if not inside.any():
            continue
        draw[inside] = fd.softplus_inverse(prim.density)
        craw[inside] = fd.sigmoid_inverse(prim.color_at(pts[inside]))
    f.density_raw = draw.reshape(nx, ny, nz).astype(np.float32)
    f.color_raw = craw.reshape(nx, ny, nz, 3).astype(np.float32)
    f.invalidate()
    return f


# ---------------------------------------------------------------------------
# scene spec
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: int
    camera: Camera
    object_prims: list = dc_field(default_factory=list)
    background_prims: list = dc_field(default_factory=list)
    bg_bbox_min: np.ndarray | None = None
    bg_bbox_max: np.ndarray | None = None
    bg_resolution: int | None = None

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    @property
    def bounding_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.bbox_max - self.bbox_min))


def _floats(parts, n, line_no, what):
    if len(parts) not in (n if isinstance(n, tuple) else (n,)):
        raise SpecParse(line_no, f"{what}: expected {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as e:
        raise SpecParse(line_no, f"{what}: {e}") from e


def parse_scene(text: str) -> SceneSpec:
    bbox = None
    resolution = None
    camera = None
    obj_prims: list = []
    bg_prims: list = []
    bg_bbox = None
    bg_res = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecParse(line_no, "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        parts = value.split()
        if key == "bbox":
            v = _floats(parts, 6, line_no, "bbox")
            bbox = (np.array(v[:3]), np.array(v[3:]))
        elif key == "background.bbox":
            v = _floats(parts, 6, line_no, "background.bbox")
            bg_bbox = (np.array(v[:3]), np.array(v[3:]))
        elif key == "resolution":
            resolution = int(_floats(parts, 1, line_no, "resolution")[0])
        elif key == "background.resolution":
            bg_res = int(_floats(parts, 1, line_no, "background.resolution")[0])
        elif key == "camera":
            v = _floats(parts, 6, line_no, "camera")
            fx, fy, cx, cy, w, h = v
            if not (fx > 0 and fy > 0):
                raise SpecParse(line_no, "camera focal lengths must be positive")
            if not (0 < cx < w and 0 < cy < h):
                raise SpecParse(line_no, "principal point must lie inside the image")
            camera = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
        elif key in ("object.box", "background.box"):
            v = _floats(parts, (9, 10), line_no, key)
            dens = v[9] if len(v) == 10 else (
                OBJECT_DENSITY_DEFAULT if key.startswith("object") else BACKGROUND_DENSITY_DEFAULT
            )
            prim = BoxPrimitive(
                center=np.array(v[:3]),
                size=np.array(v[3:6]),
                color=np.clip(np.array(v[6:9]), 0.0, 1.0),
                density=dens,
                textured=key.startswith("object"),
            )
            if (prim.size <= 0).any():
                raise SpecParse(line_no, "box sizes must be positive")
            (obj_prims if key.startswith("object") else bg_prims).append(prim)
        elif key in ("object.sphere", "background.sphere"):
            v = _floats(parts, (7, 8), line_no, key)
            dens = v[7] if len(v) == 8 else (
                OBJECT_DENSITY_DEFAULT if key.startswith("object") else BACKGROUND_DENSITY_DEFAULT
            )
            if v[3] <= 0:
                raise SpecParse(line_no, "sphere radius must be positive")
            prim = SpherePrimitive(
                center=np.array(v[:3]),
                radius=v[3],
                color=np.clip(np.array(v[4:7]), 0.0, 1.0),
                density=dens,
                textured=key.startswith("object"),
            )
            (obj_prims if key.startswith("object") else bg_prims).append(prim)
        else:
            raise SpecParse(line_no, f"unknown key {key!r}")

    if bbox is None:
        raise SpecParse(0, "missing bbox")
    if resolution is None:
        raise SpecParse(0, "missing resolution")
    if camera is None:
        raise SpecParse(0, "missing camera")
    if not obj_prims:
        raise SpecParse(0, "scene has no object primitives")
    if not np.all(bbox[0] < bbox[1]):
        raise SpecParse(0, "bbox min must be strictly below max")
    for prim in obj_prims:
        lo, hi = prim.aabb()
        if (lo < bbox[0] - 1e-9).any() or (hi > bbox[1] + 1e-9).any():
            raise SpecParse(0, "object primitive exceeds the object bbox")
    if bg_bbox is None and bg_prims:
        ext = 4.0 * np.maximum(np.abs(bbox[0]), np.abs(bbox[1])).max()
        lo = np.full(3, -ext)
        hi = np.full(3, ext)
        for prim in bg_prims:
            plo, phi = prim.aabb()
            lo = np.minimum(lo, plo)
            hi = np.maximum(hi, phi)
        bg_bbox = (lo, hi)
    return SceneSpec(
        bbox_min=bbox[0],
        bbox_max=bbox[1],
        resolution=resolution,
        camera=camera,
        object_prims=obj_prims,
        background_prims=bg_prims,
        bg_bbox_min=None if bg_bbox is None else bg_bbox[0],
        bg_bbox_max=None if bg_bbox is None else bg_bbox[1],
        bg_resolution=bg_res if bg_res is not None else resolution,
    )


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene(fh.read())


def standard_scene_path() -> str:
    return str(resources.files("voxtrack.data").joinpath("standard.scn"))


def bundled_trajectory_path(name: str) -> str:
    return str(resources.files("voxtrack.data").joinpath(f"{name}.trj"))


# ---------------------------------------------------------------------------
# built scene
# ---------------------------------------------------------------------------

@dataclass
class BuiltScene:
    spec: SceneSpec
    background: fd.VoxelField | None
    object_field: fd.VoxelField
    object_map: fd.ObjectMap
    bundle: cs.ReferenceBundle

    @property
    def camera(self) -> Camera:
        return self.spec.camera

    @property
    def diameter(self) -> float:
        return self.object_map.diameter


def bundle_camera_for(spec: SceneSpec) -> Camera:
    """Square canonical-view camera at the scene camera's focal scale, so
    bundle descriptors match query descriptors at pixel scale.  Sized to
    frame the object (at 3x its bounding radius) with a 1.35 margin."""
    fx = spec.camera.fx
    fy = spec.camera.fy
    diag = 2.0 * spec.bounding_radius
    distance = 3.0 * spec.bounding_radius
    size = int(np.clip(math.ceil(1.35 * max(fx, fy) * diag / distance / 16.0) * 16, 128, 512))
    return Camera(fx=fx, fy=fy, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def training_poses(spec: SceneSpec, n_ring: int = 12, elevations=(12.0, 38.0)) -> list[Pose]:
    """Deterministic capture poses for the fidelity (fitting) path."""
    poses = []
    radius = 2.6 * spec.bounding_radius
    for elev in elevations:
        e = math.radians(elev)
        for k in range(n_ring):
            a = 2.0 * math.pi * k / n_ring + (0.5 if elev != elevations[0] else 0.0)
            eye = spec.center + radius * np.array(
                [math.cos(a) * math.cos(e), math.sin(a) * math.cos(e), math.sin(e)]
            )
            poses.append(look_at(eye, spec.center))
    return poses


def build_scene(
    spec: SceneSpec,
    seed: int = 0,
    fidelity: bool = False,
    map_points: int = 400,
    density_threshold: float = 1.0,
    fit_iters: int = 300,
    fit_rays_per_view: int = 2048,
    fit_image_size: int = 128,
) -> BuiltScene:
    """Rasterize (or fit) the fields, extract the surface map, and build the
    cold-start bundle.  Deterministic given the seed."""
    background = None
    if spec.background_prims:
        background = rasterize(
            spec.background_prims, spec.bg_bbox_min, spec.bg_bbox_max, spec.bg_resolution
        )
    analytic = rasterize(spec.object_prims, spec.bbox_min, spec.bbox_max, spec.resolution)
    if fidelity:
        fit_cam = Camera(
            fx=fit_image_size * 1.1,
            fy=fit_image_size * 1.1,
            cx=fit_image_size / 2.0,
            cy=fit_image_size / 2.0,
            width=fit_image_size,
            height=fit_image_size,
        )
        images = [
            (fd.render_view(analytic, background, fit_cam, p).rgb, p, fit_cam)
            for p in training_poses(spec)
        ]
        init = fd.VoxelField.constant(
            spec.bbox_min, spec.bbox_max, spec.resolution, density=0.02, color=[0.5, 0.5, 0.5]
        )
        result = fd.fit_difference_field(
            images, background, init, iters=fit_iters,
            rays_per_view=fit_rays_per_view, seed=seed,
        )
        object_field = result.field
    else:
        object_field = analytic
    object_map = fd.extract_object_points(
        object_field, density_threshold=density_threshold, m=map_points, seed=seed
    )
    bundle = cs.build_reference_bundle(object_field, camera=bundle_camera_for(spec))
    cs.fill_map_descriptors(object_map, bundle)
    return BuiltScene(
        spec=spec,
        background=background,
        object_field=object_field,
        object_map=object_map,
        bundle=bundle,
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

TRAJECTORY_KINDS = ("orbit", "roll", "static", "random-walk")


@dataclass
class TrajectorySpec:
    kind: str = "orbit"
    frames: int = 100
    seed: int = 0
    noise: float = 0.0
    rate_deg: float = 1.8
    elevation_deg: float = 18.0
    azimuth_deg: float = 0.0
    distance: float = 0.0  # 0: auto (3x bounding radius)
    rot_deg: float = 0.5
    trans_frac: float = 0.005
    occlude: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if not (0.0 <= self.noise <= 0.1):
            raise ValueError("noise must lie in [0, 0.1]")


def parse_trajectory(text: str) -> TrajectorySpec:
    kwargs = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecParse(line_no, "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        parts = value.split()
        try:
            if key == "kind":
                kwargs["kind"] = parts[0]
            elif key in ("frames", "seed"):
                kwargs[key] = int(parts[0])
            elif key in (
                "noise", "rate_deg", "elevation_deg", "azimuth_deg",
                "distance", "rot_deg", "trans_frac",
            ):
                kwargs[key] = float(parts[0])
            elif key == "occlude":
                kwargs["occlude"] = (int(parts[0]), int(parts[1]))
            else:
                raise SpecParse(line_no, f"unknown key {key!r}")
        except (IndexError, ValueError) as e:
            if isinstance(e, SpecParse):
                raise
            raise SpecParse(line_no, f"{key}: {e}") from e
    try:
        return TrajectorySpec(**kwargs)
    except ValueError as e:
        raise SpecParse(0, str(e)) from e


def load_trajectory(path) -> TrajectorySpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trajectory(fh.read())


def trajectory_poses(spec: SceneSpec, traj: TrajectorySpec) -> list[Pose]:
    """Ground-truth camera poses (scene frame -> camera frame) per frame."""
    radius = traj.distance if traj.distance > 0 else 3.0 * spec.bounding_radius
    e = math.radians(traj.elevation_deg)
    a0 = math.radians(traj.azimuth_deg)

    def ring_pose(azimuth):
        eye = spec.center + radius * np.array(
            [math.cos(azimuth) * math.cos(e), math.sin(azimuth) * math.cos(e), math.sin(e)]
        )
        return look_at(eye, spec.center)

    if traj.kind == "orbit":
        step = math.radians(traj.rate_deg)
        return [ring_pose(a0 + k * step) for k in range(traj.frames)]
    if traj.kind == "static":
        p = ring_pose(a0)
        return [p for _ in range(traj.frames)]
    if traj.kind == "roll":
        p0 = ring_pose(a0)
        out = []
        for k in range(traj.frames):
            ang = 0.5 * math.radians(traj.rate_deg) * k
            roll = Pose(np.array([math.cos(ang), 0.0, 0.0, math.sin(ang)]), np.zeros(3))
            out.append(compose(roll, p0))
        return out
    # random-walk
    rng = np.random.default_rng(traj.seed)
    diam = float(np.linalg.norm(spec.bbox_max - spec.bbox_min))
    pose = ring_pose(a0)
    out = [pose]
    for _ in range(traj.frames - 1):
        axis = rng.normal(size=3)
        axis /= max(np.linalg.norm(axis), 1e-12)
        v = rng.normal(size=3)
        v *= traj.trans_frac * diam / max(np.linalg.norm(v), 1e-12)
        pose = compose(exp(np.concatenate([math.radians(traj.rot_deg) * axis, v])), pose)
        out.append(pose)
    return out


def synth_sequence(scene: BuiltScene, traj: TrajectorySpec):
    """Rendered query frames with ground truth: ``list[(rgb, Pose)]``.

    Frames inside the ``occlude`` range render with the object's density
    zeroed (background only); ground truth poses are still recorded.
    Per-pixel Gaussian noise is seeded and applied in query space only.
    """
    poses = trajectory_poses(scene.spec, traj)
    rng = np.random.default_rng(traj.seed)
    cam = scene.camera
    empty_obj = None
    frames = []
    for k, pose in enumerate(poses):
        occluded = traj.occlude is not None and traj.occlude[0] <= k <= traj.occlude[1]
        if occluded and empty_obj is None:
            empty_obj = fd.VoxelField.empty(
                scene.object_field.bbox_min, scene.object_field.bbox_max, 4
            )
        obj = empty_obj if occluded else scene.object_field
        rgb = fd.render_view(obj, scene.background, cam, pose).rgb
        if traj.noise > 0:
            rgb = np.clip(rgb + rng.normal(scale=traj.noise, size=rgb.shape), 0.0, 1.0)
        frames.append((rgb, pose))
    return frames


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    frames: int
    warm_frames: int
    cold_frames: int
    cold_start_count: int
    rotation_err_deg: np.ndarray      # per frame, NaN when cold
    translation_err_frac: np.ndarray  # fraction of object diameter
    add: np.ndarray                   # scene units
    success_rate: float
    jitter_rotation_deg: float
    jitter_translation_frac: float
    diameter: float

    def _agg(self, arr, q):
        vals = arr[np.isfinite(arr)]
        return float(np.percentile(vals, q)) if vals.size else math.nan

    def to_flat_dict(self) -> dict:
        return {
            "frames": self.frames,
            "warm_frames": self.warm_frames,
            "cold_frames": self.cold_frames,
            "cold_start_count": self.cold_start_count,
            "rotation_err_median_deg": self._agg(self.rotation_err_deg, 50),
            "rotation_err_p90_deg": self._agg(self.rotation_err_deg, 90),
            "translation_err_median_frac": self._agg(self.translation_err_frac, 50),
            "translation_err_p90_frac": self._agg(self.translation_err_frac, 90),
            "add_median": self._agg(self.add, 50),
            "add_p90": self._agg(self.add, 90),
            "success_rate": self.success_rate,
            "jitter_rotation_deg": self.jitter_rotation_deg,
            "jitter_translation_frac": self.jitter_translation_frac,
            "object_diameter": self.diameter,
        }


def evaluate(records, gt_poses, map_points: np.ndarray) -> Metrics:
    """Compare estimated per-frame (state, pose) records against ground truth.

    ``records``: iterable of ``(state, Pose | None)`` with state "cold" or
    "warm" (pose required iff warm).  Cold frames count as failures for the
    success rate and as NaN in the error arrays.  Jitter is the standard
    deviation of consecutive warm-to-warm relative pose deltas.
    """
    records = list(records)
    gt_poses = list(gt_poses)
    if len(records) != len(gt_poses):
        raise LengthMismatch(f"{len(records)} estimates vs {len(gt_poses)} ground truth poses")
    pts = np.asarray(map_points, dtype=np.float64)
    from scipy.spatial.distance import pdist

    diameter = float(pdist(pts).max()) if pts.shape[0] >= 2 else 1.0

    n = len(records)
    rot = np.full(n, np.nan)
    trans = np.full(n, np.nan)
    add = np.full(n, np.nan)
    success = np.zeros(n, dtype=bool)
    for k, ((state, pose), gt) in enumerate(zip(records, gt_poses)):
        if state != "warm" or pose is None:
            continue
        rot[k] = math.degrees(relative_rotation_angle(pose, gt))
        trans[k] = float(np.linalg.norm(pose.t - gt.t)) / diameter
        add[k] = float(
            np.linalg.norm(transform_points(pose, pts) - transform_points(gt, pts), axis=1).mean()
        )
        success[k] = rot[k] < 5.0 and trans[k] < 0.05

    # jitter: std of frame-to-frame relative deltas over consecutive warm pairs
    drots, dtrans = [], []
    for k in range(1, n):
        (s0, p0), (s1, p1) = records[k - 1], records[k]
        if s0 == "warm" and s1 == "warm" and p0 is not None and p1 is not None:
            delta = compose(inverse(p0), p1)
            drots.append(math.degrees(2.0 * math.atan2(np.linalg.norm(delta.q[1:]), abs(delta.q[0]))))
            dtrans.append(float(np.linalg.norm(delta.t)) / diameter)
    warm = sum(1 for s, _ in records if s == "warm")
    # every cold frame is a failed cold-start attempt; every entry into the
    # warm state from cold (or at frame 0) is a successful one
    cold_starts = 0
    for k, (state, _) in enumerate(records):
        if state != "warm":
            cold_starts += 1
        elif k == 0 or records[k - 1][0] != "warm":
            cold_starts += 1
    return Metrics(
        frames=n,
        warm_frames=warm,
        cold_frames=n - warm,
        cold_start_count=cold_starts,
        rotation_err_deg=rot,
        translation_err_frac=trans,
        add=add,
        success_rate=float(success.mean()) if n else 0.0,
        jitter_rotation_deg=float(np.std(drots)) if len(drots) >= 2 else math.nan,
        jitter_translation_frac=float(np.std(dtrans)) if len(dtrans) >= 2 else math.nan,
        diameter=diameter,
    )


# ---------------------------------------------------------------------------
# ground-truth CSV
# ---------------------------------------------------------------------------

def write_gt_csv(path, poses: list[Pose]):
    from voxtrack.geometry import pose_to_csv_fields

    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("frame,qw,qx,qy,qz,tx,ty,tz\n")
        for k, p in enumerate(poses):
            fh.write(f"{k}," + ",".join(pose_to_csv_fields(p)) + "\n")


def read_gt_csv(path) -> list[Pose]:
    from voxtrack.geometry import pose_from_csv_fields

    poses = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("frame,"):
            raise ValueError("bad ground-truth CSV header")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            poses.append(pose_from_csv_fields(fields[1:8]))
    return poses
