"""Voxel radiance fields: storage, volume rendering, compositing, fitting.

A :class:`VoxelField` stores *pre-activation* grids; densities go through a
softplus and colors through a sigmoid on read, so any real-valued update
(e.g. a gradient step) keeps densities nonnegative and colors inside
[0, 1].  A node value of ``-inf`` activates to exactly zero density, which
is how empty space renders exactly black with zero opacity.

Grids are node-based: ``resolution`` counts nodes per axis, values between
nodes come from trilinear interpolation, and everything outside the
bounding box samples to (0, black).

The object and background fields share one coordinate frame, and the
per-sample composition of their densities and colors is

    sigma = sigma_b + sigma_o
    c     = (sigma_b * c_b + sigma_o * c_o) / sigma

with exact passthrough when either density is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from voxtrack import _kernels
from voxtrack.geometry import Camera, Pose, transform_points

DEFAULT_RESOLUTION = 96


class InvalidRay(ValueError):
    """Non-unit direction, or an empty [near, far) interval."""


class NonFiniteLoss(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite fitting loss at iteration {iteration}")
        self.iteration = iteration


class InsufficientSurface(RuntimeError):
    """Surface sampling found fewer than half the requested points."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Raw value whose softplus is ``y`` (y > 0); -inf for y == 0."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(y > 0, y + np.log(-np.expm1(-np.maximum(y, 1e-300))), -np.inf)


def sigmoid_inverse(y, eps: float = 1e-6):
    y = np.clip(np.asarray(y, dtype=np.float64), eps, 1.0 - eps)
    return np.log(y / (1.0 - y))


@dataclass
class VoxelField:
    """Dense voxel grid of (density, RGB) over an axis-aligned bounding box."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density_raw: np.ndarray  # (nx, ny, nz) float32 pre-activation
    color_raw: np.ndarray    # (nx, ny, nz, 3) float32 pre-activation

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be strictly below bbox_max componentwise")
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float32)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float32)
        if self.density_raw.ndim != 3 or self.color_raw.shape != self.density_raw.shape + (3,):
            raise ValueError("grid shapes inconsistent")
        if min(self.density_raw.shape) < 2:
            raise ValueError("need at least 2 nodes per axis")
        self._cache: np.ndarray | None = None
        self._support = None

    @classmethod
    def empty(cls, bbox_min, bbox_max, resolution) -> "VoxelField":
        """Field rendering as exactly empty space (zero density everywhere)."""
        nx, ny, nz = cls._res3(resolution)
        return cls(
            bbox_min,
            bbox_max,
            np.full((nx, ny, nz), -np.inf, dtype=np.float32),
            np.zeros((nx, ny, nz, 3), dtype=np.float32),
        )

    @classmethod
    def constant(cls, bbox_min, bbox_max, resolution, density, color) -> "VoxelField":
        """Field with uniform activated density and color at every node."""
        nx, ny, nz = cls._res3(resolution)
        draw = np.full((nx, ny, nz), softplus_inverse(density), dtype=np.float32)
        craw = np.empty((nx, ny, nz, 3), dtype=np.float32)
        craw[...] = sigmoid_inverse(np.asarray(color, dtype=np.float64))
        return cls(bbox_min, bbox_max, draw, craw)

    @staticmethod
    def _res3(resolution):
        if np.isscalar(resolution):
            return (int(resolution),) * 3
        nx, ny, nz = (int(v) for v in resolution)
        return nx, ny, nz

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def node_spacing(self) -> np.ndarray:
        n = np.array(self.resolution, dtype=np.float64)
        return (self.bbox_max - self.bbox_min) / (n - 1.0)

    @property
    def min_spacing(self) -> float:
        return float(self.node_spacing.min())

    def density(self) -> np.ndarray:
        return softplus(self.density_raw.astype(np.float64))

    def color(self) -> np.ndarray:
        return expit(self.color_raw.astype(np.float64))

    def activated(self) -> np.ndarray:
        """(nx,ny,nz,4) float64 [sigma, r, g, b], cached until invalidated."""
        if self._cache is None:
            nx, ny, nz = self.resolution
            act = np.empty((nx, ny, nz, 4), dtype=np.float64)
            act[..., 0] = self.density()
            act[..., 1:] = self.color()
            self._cache = act
        return self._cache

    def invalidate(self):
        self._cache = None
        self._support = None

    def copy(self) -> "VoxelField":
        return VoxelField(
            self.bbox_min.copy(),
            self.bbox_max.copy(),
            self.density_raw.copy(),
            self.color_raw.copy(),
        )

    def support_bbox(self):
        """AABB of nodes with non-negligible density, padded one node for
        trilinear reach; None when the field is empty.  Used to plan ray
        intervals: outside the support every sample is exactly zero, so
        clipping there cannot change a render."""
        if self._support is None:
            occupied = self.density_raw > -20.0  # softplus(-20) ~ 2e-9
            if not occupied.any():
                self._support = "empty"
            else:
                spacing = self.node_spacing
                lo, hi = [], []
                for axis in range(3):
                    proj = occupied.any(axis=tuple(a for a in range(3) if a != axis))
                    idx = np.nonzero(proj)[0]
                    lo.append(max(idx[0] - 1, 0))
                    hi.append(min(idx[-1] + 1, proj.size - 1))
                self._support = (
                    self.bbox_min + np.array(lo) * spacing,
                    self.bbox_min + np.array(hi) * spacing,
                )
        return None if isinstance(self._support, str) else self._support

    def checksum(self) -> int:
        """Content hash of the raw grids (frozen-background verification)."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.bbox_min.tobytes())
        h.update(self.bbox_max.tobytes())
        h.update(np.ascontiguousarray(self.density_raw).tobytes())
        h.update(np.ascontiguousarray(self.color_raw).tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    def save(self, path):
        save_vxf(path, self)

    @staticmethod
    def load(path) -> "VoxelField":
        return load_vxf(path)


@dataclass
class RenderResult:
    rgb: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray    # (H, W) expected ray distance; 0 where opacity < 1e-6
    opacity: np.ndarray  # (H, W) accumulated alpha in [0, 1]


@dataclass
class ObjectMap:
    """Surface points of the object field with cached descriptors."""

    points: np.ndarray        # (M, 3) object-frame
    descriptors: np.ndarray   # (M, D)
    point_colors: np.ndarray  # (M, 3) diagnostic

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def diameter(self) -> float:
        from scipy.spatial.distance import pdist

        if len(self) < 2:
            return 0.0
        return float(pdist(self.points).max())

    def save(self, path):
        save_vxm(path, self)

    @staticmethod
    def load(path) -> "ObjectMap":
        return load_vxm(path)


# ---------------------------------------------------------------------------
# sampling and composition
# ---------------------------------------------------------------------------

def sample_field(f: VoxelField, x) -> tuple[float, np.ndarray]:
    """Trilinear (density, rgb) at a point; (0, black) outside the bbox."""
    p = np.asarray(x, dtype=np.float64).reshape(3)
    s, r, g, b = _kernels.sample_point(
        f.activated(), f.bbox_min, f.bbox_max, 1.0 / f.node_spacing, p
    )
    return float(s), np.array([r, g, b])


def compose_sample(sigma_b: float, c_b, sigma_o: float, c_o) -> tuple[float, np.ndarray]:
    """Per-sample density/color composition of background and object fields.

    Zero-density inputs pass the other sample through bit-exactly; the
    color of a (vanishingly) zero-density mixture is the background color.
    """
    c_b = np.asarray(c_b, dtype=np.float64)
    c_o = np.asarray(c_o, dtype=np.float64)
    if sigma_o == 0.0:
        return sigma_b, c_b.copy()
    if sigma_b == 0.0:
        return sigma_o, c_o.copy()
    sigma = sigma_b + sigma_o
    if sigma < 1e-12:
        return sigma, c_b.copy()
    return sigma, (sigma_b * c_b + sigma_o * c_o) / sigma


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _ray_box(origins, dirs, bmin, bmax):
    """Slab intersection: (t_enter, t_exit, hit) per ray, clamped to t >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bmin[None, :] - origins) * inv
        t1 = (bmax[None, :] - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # rays parallel to an axis: NaNs mean the origin decides containment
    inside = (origins >= bmin[None, :]) & (origins <= bmax[None, :])
    lo = np.where(np.isnan(lo), np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(np.isnan(hi), np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.maximum(lo.max(axis=1), 0.0)
    t_exit = hi.min(axis=1)
    hit = t_exit > t_enter
    return t_enter, t_exit, hit


def _march(origins, dirs, nears, fars, steps, f_obj: VoxelField, f_bg: VoxelField | None):
    n = origins.shape[0]
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    if f_bg is None:
        dummy = f_obj  # unused when has_bg is False
        _kernels.march_rays(
            origins, dirs, nears, fars, steps,
            f_obj.activated(), f_obj.bbox_min, f_obj.bbox_max, 1.0 / f_obj.node_spacing,
            False,
            dummy.activated(), dummy.bbox_min, dummy.bbox_max, 1.0 / dummy.node_spacing,
            rgb, depth, opacity,
        )
    else:
        _kernels.march_rays(
            origins, dirs, nears, fars, steps,
            f_obj.activated(), f_obj.bbox_min, f_obj.bbox_max, 1.0 / f_obj.node_spacing,
            True,
            f_bg.activated(), f_bg.bbox_min, f_bg.bbox_max, 1.0 / f_bg.node_spacing,
            rgb, depth, opacity,
        )
    return rgb, depth, opacity


def render_ray(
    f: VoxelField,
    origin,
    direction,
    near: float,
    far: float,
    step: float,
    f_bg: VoxelField | None = None,
):
    """Render one ray; returns ``(rgb (3,), depth, opacity)``.

    Samples sit at ``near + i*step`` up to and including ``far``, each
    weighted by the full ``step`` in the emission-absorption quadrature;
    samples outside the field bbox contribute zero.  The endpoint-inclusive
    layout carries a first-order ``exp(-tau) * sigma * step`` opacity error
    against closed-form transmittance, which halves as the step halves.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidRay("direction must be unit length")
    if not (near < far):
        raise InvalidRay(f"empty interval [{near}, {far})")
    if not step > 0:
        raise InvalidRay("step must be positive")
    rgb, depth, opacity = _march(
        origin,
        direction,
        np.array([near], dtype=np.float64),
        np.array([far], dtype=np.float64),
        np.array([step], dtype=np.float64),
        f,
        f_bg,
    )
    return rgb[0], float(depth[0]), float(opacity[0])


def camera_rays(cam: Camera, pose: Pose):
    """Object-frame origin and unit directions for every pixel center.

    Returns ``(origin (3,), dirs (H*W, 3))`` in row-major pixel order.
    """
    r = pose.rotation_matrix()
    origin = pose.camera_center()
    u = (np.arange(cam.width, dtype=np.float64) - cam.cx) / cam.fx
    v = (np.arange(cam.height, dtype=np.float64) - cam.cy) / cam.fy
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return origin, d @ r  # row-vectors times R == R^T d


def plan_rays(origins, dirs, f_obj: VoxelField, f_bg: VoxelField | None, step_scale: float):
    """Per-ray (near, far, step) against the fields' density *support*
    boxes: samples outside the support are exactly zero, so clipping the
    marched interval there changes nothing but the cost.  Rays touching the
    object's support march at the object's node spacing; background-only
    rays at the background's."""
    n = origins.shape[0]

    def box(f):
        sup = None if f is None else f.support_bbox()
        if sup is None:
            return np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool)
        return _ray_box(origins, dirs, sup[0], sup[1])

    e_o, x_o, hit_o = box(f_obj)
    fine = f_obj.min_spacing * step_scale
    if f_bg is None:
        return e_o, x_o, np.full(n, fine), hit_o
    e_b, x_b, hit_b = box(f_bg)
    nears = np.where(hit_o & hit_b, np.minimum(e_o, e_b), np.where(hit_o, e_o, e_b))
    fars = np.where(hit_o & hit_b, np.maximum(x_o, x_b), np.where(hit_o, x_o, x_b))
    coarse = f_bg.min_spacing * step_scale
    steps = np.where(hit_o, fine, coarse)
    return nears, fars, steps, hit_o | hit_b


def render_view(
    f_obj: VoxelField,
    f_bg: VoxelField | None,
    cam: Camera,
    pose: Pose,
    step_scale: float = 1.0,
    pixel_mask: np.ndarray | None = None,
) -> RenderResult:
    """Render a full view: per-pixel :func:`render_ray` with composed sampling.

    ``pixel_mask`` (H, W) restricts rendering to a sparse pixel set;
    unmasked pixels stay black with zero depth and opacity and must be
    treated as undefined by the caller.
    """
    origin, dirs = camera_rays(cam, pose)
    h, w = cam.height, cam.width
    if pixel_mask is not None:
        sel = np.ascontiguousarray(pixel_mask.reshape(-1))
        dirs = np.ascontiguousarray(dirs[sel])
    else:
        sel = None
    origins = np.broadcast_to(origin, dirs.shape).copy()
    nears, fars, steps, hit = plan_rays(origins, dirs, f_obj, f_bg, step_scale)
    fars = np.where(hit, fars, 0.0)  # no-hit rays: empty interval, skipped
    rgb, depth, opacity = _march(origins, dirs, nears, fars, steps, f_obj, f_bg)
    if sel is not None:
        full_rgb = np.zeros((h * w, 3))
        full_depth = np.zeros(h * w)
        full_op = np.zeros(h * w)
        full_rgb[sel] = rgb
        full_depth[sel] = depth
        full_op[sel] = opacity
        rgb, depth, opacity = full_rgb, full_depth, full_op
    return RenderResult(
        rgb=rgb.reshape(h, w, 3), depth=depth.reshape(h, w), opacity=opacity.reshape(h, w)
    )


# ---------------------------------------------------------------------------
# difference-field fitting (frozen background)
# ---------------------------------------------------------------------------

@dataclass
class DifferenceFitResult:
    field: VoxelField
    losses: list[float] = dc_field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def _fit_rays(images, f_obj, f_bg, rays_per_view, rng):
    """Seeded object-box-intersecting training rays pooled over all views."""
    all_o, all_d, all_t = [], [], []
    for img, pose, cam in images:
        origin, dirs = camera_rays(cam, pose)
        _, _, hit = _ray_box(
            np.broadcast_to(origin, dirs.shape), dirs, f_obj.bbox_min, f_obj.bbox_max
        )
        idx = np.nonzero(hit)[0]
        if idx.size == 0:
            continue
        take = min(rays_per_view, idx.size)
        chosen = rng.choice(idx, size=take, replace=False)
        chosen.sort()
        all_o.append(np.broadcast_to(origin, (take, 3)).copy())
        all_d.append(dirs[chosen])
        all_t.append(img.reshape(-1, 3)[chosen])
    if not all_o:
        raise ValueError("no training ray intersects the object bounding box")
    return np.concatenate(all_o), np.concatenate(all_d), np.concatenate(all_t)


def _fit_eval(origins, dirs, nears, fars, steps, nmax, fld: VoxelField, f_bg, targets, grad):
    nx, ny, nz = fld.resolution
    chunks = _kernels.FIT_CHUNKS
    loss_out = np.zeros(chunks)
    if grad:
        g_sig = np.zeros((chunks, nx, ny, nz))
        g_col = np.zeros((chunks, nx, ny, nz, 3))
    else:
        g_sig = np.zeros((chunks, 1, 1, 1))
        g_col = np.zeros((chunks, 1, 1, 1, 3))
    dact = np.empty((nx, ny, nz, 4)) if grad else np.zeros((1, 1, 1, 4))
    if grad:
        dact[..., 0] = expit(fld.density_raw.astype(np.float64))  # softplus'
        sig_c = expit(fld.color_raw.astype(np.float64))
        dact[..., 1:] = sig_c * (1.0 - sig_c)  # sigmoid'
    has_bg = f_bg is not None
    bg = f_bg if has_bg else fld
    _kernels.fit_pass(
        origins, dirs, nears, fars, steps,
        fld.activated(), dact, fld.bbox_min, fld.bbox_max, 1.0 / fld.node_spacing,
        has_bg, bg.activated(), bg.bbox_min, bg.bbox_max, 1.0 / bg.node_spacing,
        targets, grad, nmax, loss_out, g_sig, g_col,
    )
    norm = 1.0 / (3.0 * origins.shape[0])
    loss = float(loss_out.sum() * norm)
    if grad:
        return loss, g_sig.sum(axis=0) * norm, g_col.sum(axis=0) * norm
    return loss, None, None


def fit_difference_field(
    images,
    f_bg: VoxelField | None,
    init: VoxelField,
    iters: int,
    lr: float = 0.5,
    rays_per_view: int = 2048,
    seed: int = 0,
    step_scale: float = 1.0,
) -> DifferenceFitResult:
    """Fit the object field so composed renders match the training images.

    Full-batch gradient descent on the mean squared RGB error over a seeded
    set of object-box-intersecting rays.  The raw per-node gradients span
    orders of magnitude (surface vs. interior nodes), so the descent
    direction is diagonally preconditioned (RMSprop-style running second
    moment); backtracking step acceptance keeps the recorded loss trace
    non-increasing.  Only the returned field's pre-activation grids change;
    ``f_bg`` and ``init`` are never mutated.

    ``images`` is a list of ``(rgb_image, pose, camera)`` tuples.
    """
    fld = init.copy()
    if iters <= 0:
        return DifferenceFitResult(field=fld, losses=[])
    rng = np.random.default_rng(seed)
    origins, dirs, targets = _fit_rays(images, fld, f_bg, rays_per_view, rng)
    nears, fars, steps, hit = plan_rays(origins, dirs, fld, f_bg, step_scale)
    fars = np.where(hit, fars, 0.0)
    nmax = int(np.floor((fars - nears).max() / steps.min() + 1e-9)) + 2

    loss, g_sig, g_col = _fit_eval(origins, dirs, nears, fars, steps, nmax, fld, f_bg, targets, True)
    if not np.isfinite(loss):
        raise NonFiniteLoss(0)
    losses = [loss]
    beta = 0.9
    v_sig = np.zeros_like(g_sig)
    v_col = np.zeros_like(g_col)
    cur_lr = lr
    for it in range(1, iters + 1):
        v_sig = beta * v_sig + (1.0 - beta) * g_sig**2
        v_col = beta * v_col + (1.0 - beta) * g_col**2
        bias = 1.0 - beta**it
        d_sig = g_sig / (np.sqrt(v_sig / bias) + 1e-8)
        d_col = g_col / (np.sqrt(v_col / bias) + 1e-8)
        accepted = False
        for _ in range(30):
            cand = fld.copy()
            cand.density_raw = (cand.density_raw.astype(np.float64) - cur_lr * d_sig).astype(
                np.float32
            )
            cand.color_raw = (cand.color_raw.astype(np.float64) - cur_lr * d_col).astype(
                np.float32
            )
            cand.invalidate()
            cand_loss, cand_gs, cand_gc = _fit_eval(
                origins, dirs, nears, fars, steps, nmax, cand, f_bg, targets, True
            )
            if not np.isfinite(cand_loss):
                raise NonFiniteLoss(it)
            # strict improvement: loss-neutral moves would let the
            # preconditioned direction random-walk along flat directions
            # (e.g. grow background-colored phantom density)
            if cand_loss < loss * (1.0 - 1e-10):
                fld, loss, g_sig, g_col = cand, cand_loss, cand_gs, cand_gc
                losses.append(loss)
                cur_lr = min(cur_lr * 1.1, 4.0 * lr)
                accepted = True
                break
            cur_lr *= 0.5
        if not accepted:
            break  # no step length reduces the loss further
    return DifferenceFitResult(field=fld, losses=losses)


# ---------------------------------------------------------------------------
# surface extraction and visibility
# ---------------------------------------------------------------------------

def extract_object_points(
    f_obj: VoxelField,
    density_threshold: float,
    m: int,
    seed: int,
    descriptor_dim: int = 64,
) -> ObjectMap:
    """Sample surface points: random chords through the bbox, first point
    where accumulated opacity exceeds 0.5, keeping points whose local
    density clears ``density_threshold``.  Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    diag = float(np.linalg.norm(f_obj.bbox_max - f_obj.bbox_min))
    step = 0.5 * f_obj.min_spacing
    pts, cols = [], []
    budget = 40 * m
    batch = max(256, m)
    casts = 0
    act = f_obj.activated()
    inv = 1.0 / f_obj.node_spacing
    while casts < budget and len(pts) < m:
        nb = min(batch, budget - casts)
        casts += nb
        through = rng.uniform(f_obj.bbox_min, f_obj.bbox_max, size=(nb, 3))
        d = rng.normal(size=(nb, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        origins = through - d * (1.5 * diag)
        nears, fars, hit = _ray_box(origins, d, f_obj.bbox_min, f_obj.bbox_max)
        fars = np.where(hit, fars, 0.0)
        out_t = np.zeros(nb)
        out_hit = np.zeros(nb, dtype=np.bool_)
        _kernels.first_crossing(
            origins, d, nears, fars, np.full(nb, step), act,
            f_obj.bbox_min, f_obj.bbox_max, inv, out_t, out_hit,
        )
        for i in np.nonzero(out_hit)[0]:
            p = origins[i] + out_t[i] * d[i]
            s, _, _, _ = _kernels.sample_point(act, f_obj.bbox_min, f_obj.bbox_max, inv, p)
            if s > density_threshold:
                pts.append(p)
                _, r, g, b = _kernels.sample_point(act, f_obj.bbox_min, f_obj.bbox_max, inv, p)
                cols.append((r, g, b))
                if len(pts) >= m:
                    break
    if len(pts) < (m + 1) // 2:
        raise InsufficientSurface(f"found {len(pts)} surface points, need at least {(m + 1) // 2}")
    points = np.array(pts, dtype=np.float64)
    return ObjectMap(
        points=points,
        descriptors=np.zeros((points.shape[0], descriptor_dim)),
        point_colors=np.array(cols, dtype=np.float64),
    )


def visibility_mask(
    f_obj: VoxelField,
    f_bg: VoxelField | None,
    cam: Camera,
    pose: Pose,
    points: np.ndarray,
    depth_tol: float,
    depth: np.ndarray | None = None,
) -> np.ndarray:
    """Per-point visibility against the rendered depth map.

    A point is visible iff it is in front of the camera, projects inside
    the frame, and its ray distance agrees with the rendered depth at its
    pixel within ``depth_tol``.  ``depth`` may be a precomputed (H, W)
    depth image; otherwise the view is rendered here.
    """
    if depth is None:
        depth = render_view(f_obj, f_bg, cam, pose).depth
    x_cam = transform_points(pose, points)
    z = x_cam[:, 2]
    in_front = z > 1e-6
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * x_cam[:, 0] / zs + cam.cx
    v = cam.fy * x_cam[:, 1] / zs + cam.cy
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    in_frame = (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    ok = in_front & in_frame
    dist = np.linalg.norm(x_cam, axis=1)
    rendered = np.zeros(points.shape[0])
    rendered[ok] = depth[vi[ok], ui[ok]]
    return ok & (np.abs(rendered - dist) < depth_tol)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_vxf(path, f: VoxelField):
    """VXF1: text header, then float32 LE pre-activation grids (density,
    R, G, B), each in x-fastest order."""
    nx, ny, nz = f.resolution
    header = (
        "VXF1\n"
        f"bbox {' '.join(f'{v:.17g}' for v in [*f.bbox_min, *f.bbox_max])}\n"
        f"resolution {nx} {ny} {nz}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(f.density_raw.transpose(2, 1, 0), dtype="<f4").tobytes())
        for c in range(3):
            fh.write(
                np.ascontiguousarray(f.color_raw[..., c].transpose(2, 1, 0), dtype="<f4").tobytes()
            )


def load_vxf(path) -> VoxelField:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"VXF1":
            raise ValueError(f"bad field magic {magic!r}")
        bbox_line = fh.readline().split()
        res_line = fh.readline().split()
        if bbox_line[0] != b"bbox" or res_line[0] != b"resolution":
            raise ValueError("malformed VXF1 header")
        vals = [float(v) for v in bbox_line[1:]]
        nx, ny, nz = (int(v) for v in res_line[1:])
        count = nx * ny * nz
        raw = fh.read(4 * count * 4)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != 4 * count:
        raise ValueError("truncated VXF1 payload")
    dens = arr[:count].reshape(nz, ny, nx).transpose(2, 1, 0)
    color = np.empty((nx, ny, nz, 3), dtype=np.float32)
    for c in range(3):
        color[..., c] = arr[(c + 1) * count : (c + 2) * count].reshape(nz, ny, nx).transpose(2, 1, 0)
    return VoxelField(np.array(vals[:3]), np.array(vals[3:]), dens.copy(), color)


def save_vxm(path, m: ObjectMap):
    """VXM1: text header, then float32 LE blocks: points, descriptors, colors."""
    count, dim = m.descriptors.shape
    header = f"VXM1\ncount {count}\ndim {dim}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(m.points, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(m.descriptors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(m.point_colors, dtype="<f4").tobytes())


def load_vxm(path) -> ObjectMap:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"VXM1":
            raise ValueError(f"bad map magic {magic!r}")
        count = int(fh.readline().split()[1])
        dim = int(fh.readline().split()[1])
        raw = fh.read()
    arr = np.frombuffer(raw, dtype="<f4")
    need = count * (3 + dim + 3)
    if arr.size != need:
        raise ValueError("truncated VXM1 payload")
    pts = arr[: count * 3].reshape(count, 3).astype(np.float64)
    desc = arr[count * 3 : count * (3 + dim)].reshape(count, dim).astype(np.float64)
    cols = arr[count * (3 + dim) :].reshape(count, 3).astype(np.float64)
    return ObjectMap(points=pts, descriptors=desc, point_colors=cols)


def write_ppm(path, image: np.ndarray):
    """Binary PPM (P6, 8-bit).  Accepts (H, W, 3) float in [0, 1]."""
    img = np.asarray(image)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError("not a binary PPM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
