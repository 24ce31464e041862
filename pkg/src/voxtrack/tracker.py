"""The cold/warm per-frame tracking state machine.

A warm tracker crops the query around the previous pose's projection,
builds the query feature pyramid on the crop, and refines against
references rendered on-the-fly at the current estimate through the crop's
virtual camera.  Rejected refinements fall back to the cold path within
the same frame: keypoint matching against the canonical bundle plus
PnP-RANSAC, polished by one pass of the warm machinery so every accepted
pose clears the same quality bar.

Tracker instances are single-threaded and independent; all shared data
(fields, maps, bundles) is immutable, which is what makes the
multi-object path a plain process pool.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from voxtrack import align as al
from voxtrack import coldstart as cs
from voxtrack import features as ft
from voxtrack import field as fd
from voxtrack.geometry import (
    Camera,
    Pose,
    pose_from_csv_fields,
    pose_to_csv_fields,
    project_points,
    relative_rotation_angle,
    transform_points,
)

TRAJECTORY_HEADER = "frame,state,qw,qx,qy,qz,tx,ty,tz,iters,visible,residual,ms"


class InvalidConfig(ValueError):
    pass


class ObjectOutOfFrame(RuntimeError):
    """No projected object point lands inside the frame."""


@dataclass
class TrackerConfig:
    object_field: fd.VoxelField
    object_map: fd.ObjectMap
    bundle: cs.ReferenceBundle
    background: fd.VoxelField | None = None
    warm_max_residual: float = 0.08
    warm_min_visible: int = 12
    crop_margin: float = 1.25
    crop_output: int = 256
    align: al.AlignConfig | None = None
    cold: cs.ColdStartConfig | None = None
    dynamic_reference: bool = True  # False: fixed nearest canonical reference
    seed: int = 0

    def __post_init__(self):
        if self.align is None:
            self.align = al.AlignConfig(depth_tol=2.5 * self.object_field.min_spacing)
        if self.cold is None:
            self.cold = cs.ColdStartConfig()
        if not self.crop_margin > 1.0:
            raise InvalidConfig("crop_margin must exceed 1")
        if self.crop_output < 64:
            raise InvalidConfig("crop_output must be at least 64")
        if self.warm_max_residual <= 0 or self.warm_min_visible < 1:
            raise InvalidConfig("warm accept thresholds must be positive")
        if len(self.object_map) < 50:
            raise InvalidConfig("object map too sparse for tracking")
        if len(self.bundle) < 8:
            raise InvalidConfig("reference bundle must cover the view sphere")


@dataclass
class FrameReport:
    frame_index: int
    state_before: str
    state_after: str
    pose: Pose | None
    align_iterations: int
    coldstart_attempted: bool
    visible_count: int
    mean_residual: float
    wall_ms: float


def crop_for_pose(pose: Pose, cam: Camera, points: np.ndarray, margin: float, out_size: int):
    """Region of interest around the projected points, and the virtual
    camera that reproduces projection-through-crop exactly.

    Projecting a point through (pose, virtual camera) equals projecting
    through (pose, cam) and then applying ``u' = (u - x0) * sx``.
    """
    x_cam = transform_points(pose, points)
    front = x_cam[:, 2] > 1e-6
    if not front.any():
        raise ObjectOutOfFrame("all points behind the camera")
    uv, _ = project_points(cam, x_cam[front])
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * margin, 1.0)
    x0, y0 = np.maximum(center - half, 0.0)
    x1, y1 = np.minimum(center + half, [cam.width - 1.0, cam.height - 1.0])
    if not (x1 - x0 > 2.0 and y1 - y0 > 2.0):
        raise ObjectOutOfFrame("projected bounding box misses the frame")
    w = x1 - x0
    h = y1 - y0
    sx = out_size / w
    sy = out_size / h
    vcam = Camera(
        fx=cam.fx * sx,
        fy=cam.fy * sy,
        cx=(cam.cx - x0) * sx,
        cy=(cam.cy - y0) * sy,
        width=out_size,
        height=out_size,
    )
    return (float(x0), float(y0), float(w), float(h)), vcam


def resample_crop(gray: np.ndarray, roi, out_size: int) -> np.ndarray:
    """Bilinear crop-and-resize consistent with the virtual camera mapping."""
    x0, y0, w, h = roi
    ih, iw = gray.shape
    xs = x0 + np.arange(out_size) * (w / out_size)
    ys = y0 + np.arange(out_size) * (h / out_size)
    xs = np.clip(xs, 0.0, iw - 1.0)
    ys = np.clip(ys, 0.0, ih - 1.0)
    gx, gy = np.meshgrid(xs, ys)
    x0i = np.minimum(np.floor(gx).astype(np.intp), iw - 2)
    y0i = np.minimum(np.floor(gy).astype(np.intp), ih - 2)
    fx = gx - x0i
    fy = gy - y0i
    top = gray[y0i, x0i] * (1 - fx) + gray[y0i, x0i + 1] * fx
    bot = gray[y0i + 1, x0i] * (1 - fx) + gray[y0i + 1, x0i + 1] * fx
    return top * (1 - fy) + bot * fy


class Tracker:
    """Single-object tracker; create via :func:`new_tracker`."""

    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg
        self.state = "cold"
        self.pose: Pose | None = None
        self.frame_index = 0

    # -- reference rendering -------------------------------------------------

    def _render_fn(self, vcam: Camera):
        cfg = self.cfg

        def render_fn(pose: Pose, level: int, proj_uv: np.ndarray):
            if cfg.dynamic_reference:
                ref_pose = pose
            else:
                ref_pose = min(
                    (v.pose for v in cfg.bundle.views),
                    key=lambda vp: relative_rotation_angle(vp, pose),
                )
            mask = np.zeros((vcam.height, vcam.width), dtype=bool)
            uv = np.round(np.asarray(proj_uv)).astype(int)
            uv[:, 0] = np.clip(uv[:, 0], 0, vcam.width - 1)
            uv[:, 1] = np.clip(uv[:, 1], 0, vcam.height - 1)
            mask[uv[:, 1], uv[:, 0]] = True
            radius = (ft.KEYPOINT_MARGIN + 2) * int(2**level)
            from scipy.ndimage import binary_dilation

            mask = binary_dilation(mask, np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool))
            rr = fd.render_view(cfg.object_field, cfg.background, vcam, ref_pose, pixel_mask=mask)
            pyr = ft.extract_pyramid(ft.luma(rr.rgb), levels=level + 1)
            return pyr, rr.depth, ref_pose

        return render_fn

    # -- per-frame paths ------------------------------------------------------

    def _warm_pass(self, gray: np.ndarray, cam: Camera, init: Pose) -> al.AlignResult:
        cfg = self.cfg
        roi, vcam = crop_for_pose(
            init, cam, cfg.object_map.points, cfg.crop_margin, cfg.crop_output
        )
        crop = resample_crop(gray, roi, cfg.crop_output)
        levels = max(cfg.align.levels) + 1
        qpyr = ft.extract_pyramid(crop, levels=levels)
        return al.refine(
            qpyr, self._render_fn(vcam), cfg.object_map.points, init, vcam, cfg.align
        )

    def _accept(self, res: al.AlignResult) -> bool:
        return (
            res.converged
            and res.mean_residual <= self.cfg.warm_max_residual
            and res.visible_count >= self.cfg.warm_min_visible
        )

    def process_frame(self, image: np.ndarray, cam: Camera) -> FrameReport:
        if image.shape[0] != cam.height or image.shape[1] != cam.width:
            raise ValueError("image dimensions do not match the camera")
        t0 = time.perf_counter()
        gray = ft.luma(image) if image.ndim == 3 else np.asarray(image, dtype=np.float64)
        state_before = self.state
        iters = 0
        attempted_cold = False
        visible = 0
        residual = float("nan")

        accepted: Pose | None = None
        if self.state == "warm" and self.pose is not None:
            try:
                res = self._warm_pass(gray, cam, self.pose)
                iters += res.iterations
                visible = res.visible_count
                residual = res.mean_residual
                if self._accept(res):
                    accepted = res.pose
            except (al.TooFewVisible, al.Diverged, ObjectOutOfFrame, ft.ImageTooSmall):
                pass

        if accepted is None:
            attempted_cold = True
            try:
                pnp = cs.cold_localize(
                    gray, self.cfg.bundle, cam, self.cfg.cold,
                    seed=self.cfg.cold.seed + self.frame_index,
                )
                res = self._warm_pass(gray, cam, pnp.pose)  # polish pass
                iters += res.iterations
                visible = res.visible_count
                residual = res.mean_residual
                if self._accept(res):
                    accepted = res.pose
            except (
                cs.ColdStartFailed,
                al.TooFewVisible,
                al.Diverged,
                ObjectOutOfFrame,
                ft.ImageTooSmall,
            ):
                pass

        if accepted is not None:
            self.state = "warm"
            self.pose = accepted
        else:
            self.state = "cold"
            self.pose = None

        report = FrameReport(
            frame_index=self.frame_index,
            state_before=state_before,
            state_after=self.state,
            pose=self.pose,
            align_iterations=iters,
            coldstart_attempted=attempted_cold,
            visible_count=visible,
            mean_residual=residual,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        self.frame_index += 1
        return report


def new_tracker(cfg: TrackerConfig) -> Tracker:
    """A fresh tracker in the cold state."""
    return Tracker(cfg)


def run_stream(tracker: Tracker, frames) -> list[FrameReport]:
    """Process ``(image, camera)`` pairs in order."""
    return [tracker.process_frame(img, cam) for img, cam in frames]


def _run_stream_star(args):
    return run_stream(*args)


def run_multi(trackers: list[Tracker], streams, processes: int | None = None):
    """Run one tracker per stream; results are bit-identical to running each
    serially, regardless of scheduling (trackers share nothing mutable)."""
    if len(trackers) != len(streams):
        raise ValueError("need exactly one stream per tracker")
    jobs = list(zip(trackers, streams))
    if len(jobs) <= 1 or processes == 1:
        return [run_stream(t, s) for t, s in jobs]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(processes=processes or min(len(jobs), mp.cpu_count())) as pool:
        return pool.map(_run_stream_star, jobs)


# ---------------------------------------------------------------------------
# trajectory CSV
# ---------------------------------------------------------------------------

def write_trajectory(reports: list[FrameReport], path, timing: bool = False):
    """Trajectory CSV.  Pose fields are empty on cold frames.  The ms column
    is written as 0 unless ``timing`` is requested, keeping default outputs
    bit-reproducible across runs."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for r in reports:
            if r.pose is not None:
                pose_fields = pose_to_csv_fields(r.pose)
            else:
                pose_fields = [""] * 7
            resid = "" if np.isnan(r.mean_residual) else f"{r.mean_residual:.17g}"
            ms = f"{r.wall_ms:.3f}" if timing else "0"
            fh.write(
                ",".join(
                    [
                        str(r.frame_index),
                        r.state_after,
                        *pose_fields,
                        str(r.align_iterations),
                        str(r.visible_count),
                        resid,
                        ms,
                    ]
                )
                + "\n"
            )


def read_trajectory(path):
    """Parse a trajectory CSV into ``(state, Pose | None)`` records."""
    records = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != TRAJECTORY_HEADER:
            raise ValueError("unexpected trajectory header")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            state = fields[1]
            pose = pose_from_csv_fields(fields[2:9]) if fields[2] else None
            records.append((state, pose))
    return records
