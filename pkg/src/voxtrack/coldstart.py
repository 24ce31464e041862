"""Pose from scratch: descriptor matching against canonical rendered views,
three-point resection (P3P) inside RANSAC, and reprojection refinement.

The bundle caches 26 canonical views on a sphere around the object (the
subdivided-octahedron directions) rendered from the object field alone,
each with keypoints, descriptors, and per-keypoint 3-D points recovered
from the rendered depth.  In-plane rotations are deliberately *not*
covered: the patch descriptors are rotation sensitive, so cold starts
under extreme roll are expected to fail; handling roll is the warm
tracker's job via dynamically rendered references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial import polynomial as npoly

from voxtrack import features as ft
from voxtrack import field as fd
from voxtrack.geometry import (
    Camera,
    Pose,
    compose,
    exp,
    inverse,
    look_at,
    project_points,
    quat_from_matrix,
    transform_points,
)


class DegenerateConfiguration(ValueError):
    """Collinear or coincident 3-D points handed to the minimal solver."""


class TooFewCorrespondences(ValueError):
    """RANSAC needs at least 4 correspondences."""


class NoConsensus(RuntimeError):
    """Best RANSAC model has fewer than 6 inliers."""


class ColdStartFailed(RuntimeError):
    def __init__(self, reason: str, best: "PnPResult | None" = None):
        super().__init__(reason)
        self.best = best


@dataclass
class PnPResult:
    pose: Pose
    inliers: np.ndarray      # indices into the correspondence list
    inlier_count: int
    rms: float               # reprojection RMS over inliers, pixels


@dataclass
class ColdStartConfig:
    max_keypoints: int = 512
    nms_radius: int = 4
    ratio: float = 0.8
    ransac_iters: int = 1000  # pooled matches are junk-heavy; PROSAC needs room
    inlier_px: float = 2.0
    min_inliers: int = 10
    seed: int = 0


@dataclass
class CanonicalView:
    image: np.ndarray        # grayscale render
    pose: Pose
    keypoints_uv: np.ndarray  # (K, 2)
    descriptors: np.ndarray   # (K, D)
    points3d: np.ndarray      # (K, 3) object frame, from depth backprojection


@dataclass
class ReferenceBundle:
    views: list[CanonicalView]
    camera: Camera

    def __len__(self) -> int:
        return len(self.views)


# ---------------------------------------------------------------------------
# descriptor matching
# ---------------------------------------------------------------------------

def match(query_desc: np.ndarray, ref_desc: np.ndarray, ratio: float) -> list[tuple[int, int]]:
    """Mutual nearest neighbors passing Lowe's ratio test.

    Descriptors must be L2-normalized.  With a single reference descriptor
    the ratio test is vacuous and mutuality alone decides.  Pairs come out
    ordered by query index.
    """
    q = np.asarray(query_desc, dtype=np.float64)
    r = np.asarray(ref_desc, dtype=np.float64)
    if q.size == 0 or r.size == 0:
        return []
    sim = q @ r.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)
    best_r = d2.argmin(axis=1)
    best_q = d2.argmin(axis=0)
    pairs = []
    for qi in range(q.shape[0]):
        ri = int(best_r[qi])
        if int(best_q[ri]) != qi:
            continue
        if r.shape[0] >= 2:
            row = d2[qi]
            d1 = row[ri]
            second = np.partition(row, 1)[1]
            if not math.sqrt(d1) < ratio * math.sqrt(second):
                continue
        pairs.append((qi, ri))
    return pairs


# ---------------------------------------------------------------------------
# P3P (Grunert's distance formulation)
# ---------------------------------------------------------------------------

def _bearings(cam: Camera, uv: np.ndarray) -> np.ndarray:
    d = np.stack(
        [(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(uv.shape[0])],
        axis=1,
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rigid_from_three(x_obj: np.ndarray, y_cam: np.ndarray) -> Pose:
    """Least-squares rigid transform y = R x + t from three pairs (Kabsch)."""
    xc = x_obj - x_obj.mean(axis=0)
    yc = y_cam - y_cam.mean(axis=0)
    h = xc.T @ yc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = y_cam.mean(axis=0) - r @ x_obj.mean(axis=0)
    return Pose(quat_from_matrix(r), t)


def p3p(uv: np.ndarray, x_obj: np.ndarray, cam: Camera) -> list[Pose]:
    """All physically valid solutions of three-point resection.

    Returns up to 4 candidate poses; each reprojects the three inputs to
    within 1e-6 px (candidates that fail that check numerically are
    dropped).  Raises :class:`DegenerateConfiguration` for collinear or
    coincident points.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(3, 2)
    x = np.asarray(x_obj, dtype=np.float64).reshape(3, 3)
    cross = np.cross(x[1] - x[0], x[2] - x[0])
    scale = max(np.linalg.norm(x[1] - x[0]), np.linalg.norm(x[2] - x[0]), 1e-12)
    if np.linalg.norm(cross) < 1e-10 * scale * scale:
        raise DegenerateConfiguration("3-D points are collinear or coincident")

    f = _bearings(cam, uv)
    a2 = float(np.sum((x[1] - x[2]) ** 2))
    b2 = float(np.sum((x[0] - x[2]) ** 2))
    c2 = float(np.sum((x[0] - x[1]) ** 2))
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])

    # u = P(v) / D(v) from the difference of the distance equations,
    # substituted back to yield a quartic in v = s3/s1.
    p_num = np.array([c2 - a2 - b2, 2.0 * cos_b * (a2 - c2), b2 - a2 + c2])
    d_den = np.array([-2.0 * b2 * cos_g, 2.0 * b2 * cos_a])
    pp = npoly.polymul(p_num, p_num)
    dd = npoly.polymul(d_den, d_den)
    pd = npoly.polymul(p_num, d_den)
    lhs = b2 * npoly.polyadd(npoly.polyadd(pp, dd), -2.0 * cos_g * pd)
    rhs = c2 * npoly.polymul(np.array([1.0, -2.0 * cos_b, 1.0]), dd)
    quartic = npoly.polysub(lhs, rhs)
    lead = np.max(np.abs(quartic))
    if lead < 1e-18:
        raise DegenerateConfiguration("resection polynomial vanished")
    roots = npoly.polyroots(quartic / lead)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        # polish the root with a couple of Newton steps
        for _ in range(2):
            val = npoly.polyval(v, quartic)
            dval = npoly.polyval(v, npoly.polyder(quartic))
            if dval != 0.0:
                v -= val / dval
        if v <= 0:
            continue
        den = npoly.polyval(v, d_den)
        if abs(den) < 1e-14:
            continue
        u = npoly.polyval(v, p_num) / den
        if u <= 0:
            continue
        denom = 1.0 + v * v - 2.0 * v * cos_b
        if not (np.isfinite(denom) and denom > 1e-14):
            continue
        s1sq = b2 / denom
        if not (np.isfinite(s1sq) and s1sq > 0):
            continue
        s1 = math.sqrt(s1sq)
        y = np.stack([s1 * f[0], (u * s1) * f[1], (v * s1) * f[2]])
        if not np.isfinite(y).all():
            continue
        pose = _rigid_from_three(x, y)
        proj, ok = project_points(cam, transform_points(pose, x))
        if not ok.all():
            continue
        if np.abs(proj - uv).max() < 1e-6:
            poses.append(pose)
    return poses


# ---------------------------------------------------------------------------
# RANSAC + nonlinear refinement
# ---------------------------------------------------------------------------

def _reproj_errors(pose: Pose, pts3d: np.ndarray, uv: np.ndarray, cam: Camera) -> np.ndarray:
    xc = transform_points(pose, pts3d)
    proj, ok = project_points(cam, xc)
    err = np.linalg.norm(proj - uv, axis=1)
    err[~ok] = np.inf
    return err


def refine_reprojection(
    pose: Pose, pts3d: np.ndarray, uv: np.ndarray, cam: Camera, iters: int = 20
) -> Pose:
    """Gauss-Newton (damped) reprojection minimization with manifold updates.

    Returns the best pose seen; never one with a higher RMS than the input.
    """
    best = pose
    errs = _reproj_errors(pose, pts3d, uv, cam)
    if not np.isfinite(errs).all():
        return pose
    best_cost = float(np.mean(errs**2))
    lam = 1e-6
    cur = pose
    cur_cost = best_cost
    for _ in range(iters):
        xc = transform_points(cur, pts3d)
        z = xc[:, 2]
        if np.any(z <= 1e-6):
            break
        proj, _ = project_points(cam, xc)
        res = (proj - uv).reshape(-1)
        iz = 1.0 / z
        m = pts3d.shape[0]
        pj = np.zeros((m, 2, 3))
        pj[:, 0, 0] = cam.fx * iz
        pj[:, 0, 2] = -cam.fx * xc[:, 0] * iz * iz
        pj[:, 1, 1] = cam.fy * iz
        pj[:, 1, 2] = -cam.fy * xc[:, 1] * iz * iz
        act = np.zeros((m, 3, 6))
        act[:, 0, 1] = xc[:, 2]
        act[:, 0, 2] = -xc[:, 1]
        act[:, 1, 0] = -xc[:, 2]
        act[:, 1, 2] = xc[:, 0]
        act[:, 2, 0] = xc[:, 1]
        act[:, 2, 1] = -xc[:, 0]
        act[:, 0, 3] = 1.0
        act[:, 1, 4] = 1.0
        act[:, 2, 5] = 1.0
        jac = np.einsum("mpq,mqr->mpr", pj, act).reshape(-1, 6)
        h = jac.T @ jac
        g = jac.T @ res
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = compose(exp(delta), cur)
            cand_errs = _reproj_errors(cand, pts3d, uv, cam)
            cand_cost = float(np.mean(cand_errs**2)) if np.isfinite(cand_errs).all() else np.inf
            if cand_cost < cur_cost:
                cur, cur_cost = cand, cand_cost
                lam = max(lam * 0.1, 1e-12)
                stepped = True
                break
            lam *= 10
        if not stepped:
            break
        if cur_cost < best_cost:
            best, best_cost = cur, cur_cost
        if np.linalg.norm(delta) < 1e-12:
            break
    return best


def pnp_ransac(
    uv: np.ndarray,
    pts3d: np.ndarray,
    cam: Camera,
    max_iters: int = 500,
    inlier_px: float = 2.0,
    seed: int = 0,
    quality: np.ndarray | None = None,
) -> PnPResult:
    """RANSAC over P3P with a 4th-point disambiguation, then Gauss-Newton
    refinement on the inliers.  Deterministic given the seed.

    When per-correspondence ``quality`` costs are given (lower is better),
    minimal samples are drawn progressively from the best-ranked prefix,
    growing to the whole set (PROSAC-style); with heavily contaminated
    pools this finds the all-inlier sample orders of magnitude sooner.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    pts3d = np.asarray(pts3d, dtype=np.float64).reshape(-1, 3)
    n = uv.shape[0]
    if n < 4:
        raise TooFewCorrespondences(f"{n} correspondences < 4")
    rng = np.random.default_rng(seed)
    ranked = None if quality is None else np.argsort(np.asarray(quality), kind="stable")
    best_pose = None
    best_count = 0
    best_score = 0.0
    for it in range(max_iters):
        if ranked is None:
            idx = rng.choice(n, size=4, replace=False)
        else:
            horizon = max(12, int(math.ceil(n * min(1.0, 0.08 + 0.92 * it / (0.7 * max_iters)))))
            horizon = min(horizon, n)
            if horizon < 4:
                horizon = min(4, n)
            idx = ranked[rng.choice(horizon, size=4, replace=False)]
        tri, probe = idx[:3], int(idx[3])
        try:
            candidates = p3p(uv[tri], pts3d[tri], cam)
        except DegenerateConfiguration:
            continue
        if not candidates:
            continue
        # disambiguate with the 4th point; ties by 4-point RMS then index
        scored = []
        for ci, cand in enumerate(candidates):
            e4 = _reproj_errors(cand, pts3d[idx], uv[idx], cam)
            probe_err = e4[3]
            rms4 = float(np.sqrt(np.mean(np.square(np.minimum(e4, 1e12)))))
            scored.append((probe_err, rms4, ci))
        scored.sort()
        chosen = candidates[scored[0][2]]
        errs = _reproj_errors(chosen, pts3d, uv, cam)
        inl = errs <= inlier_px
        count = int(inl.sum())
        # MSAC-style score: tight inliers outweigh marginal ones, which
        # separates the true model from aliased near-ties at equal counts
        score = float(np.sum(np.maximum(0.0, 1.0 - (errs[inl] / inlier_px) ** 2)))
        if score > best_score:
            best_pose, best_count, best_score = chosen, count, score
    if best_pose is None or best_count < 6:
        raise NoConsensus(f"best model has {best_count} inliers < 6")

    def rms_at(pose):
        errs = _reproj_errors(pose, pts3d, uv, cam)
        inl = errs <= inlier_px
        if not inl.any():
            return errs, inl, np.inf
        return errs, inl, float(np.sqrt(np.mean(errs[inl] ** 2)))

    _, inl, raw_rms = rms_at(best_pose)
    refined = refine_reprojection(best_pose, pts3d[inl], uv[inl], cam)
    # local optimization with shrinking inlier bands: the tightest
    # correspondences are the internally consistent ones, so re-refining on
    # them removes the bias of borderline inliers.  Each stage is kept only
    # if the full-band RMS does not exceed the unrefined model's.
    errs, band, best_rms = rms_at(refined)
    if best_rms > raw_rms:
        refined, (errs, band, best_rms) = best_pose, rms_at(best_pose)
    for shrink in (0.5, 0.25):
        thr = max(inlier_px * shrink, 0.25)
        tight = errs <= thr
        if int(tight.sum()) < max(12, 6):
            break
        cand = refine_reprojection(refined, pts3d[tight], uv[tight], cam)
        cand_errs, cand_band, cand_rms = rms_at(cand)
        if cand_rms <= raw_rms and int(cand_band.sum()) >= 6:
            refined, errs, band, best_rms = cand, cand_errs, cand_band, cand_rms
        else:
            break
    if int(band.sum()) < 6:
        raise NoConsensus(f"refined model keeps {int(band.sum())} inliers < 6")
    return PnPResult(
        pose=refined,
        inliers=np.nonzero(band)[0],
        inlier_count=int(band.sum()),
        rms=best_rms,
    )


# ---------------------------------------------------------------------------
# reference bundle + cold localization
# ---------------------------------------------------------------------------

def octahedron_directions() -> np.ndarray:
    """The 26 nonzero sign patterns of {-1,0,1}^3, normalized: vertices,
    edge midpoints, and face centers of the octahedron's subdivision."""
    dirs = []
    for sx in (-1, 0, 1):
        for sy in (-1, 0, 1):
            for sz in (-1, 0, 1):
                if sx == sy == sz == 0:
                    continue
                d = np.array([sx, sy, sz], dtype=np.float64)
                dirs.append(d / np.linalg.norm(d))
    return np.stack(dirs)


def default_bundle_camera(image_size: int = 256) -> Camera:
    # half field of view ~21.8 deg: the object at 3x its bounding radius
    # fills ~0.83 of the half image
    return Camera(
        fx=image_size * 1.25,
        fy=image_size * 1.25,
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        width=image_size,
        height=image_size,
    )


def build_reference_bundle(
    f_obj: fd.VoxelField,
    radius_scale: float = 3.0,
    image_size: int = 256,
    max_keypoints: int = 256,
    nms_radius: int = 4,
    camera: Camera | None = None,
) -> ReferenceBundle:
    """Render the canonical views and cache keypoints, descriptors, and
    depth-backprojected 3-D points.  Fully deterministic.

    Pass a ``camera`` whose focal length matches the deployment camera so
    the cached descriptors live at the same pixel scale the tracker will
    see; patch descriptors are not scale invariant.
    """
    cam = camera if camera is not None else default_bundle_camera(image_size)
    center = 0.5 * (f_obj.bbox_min + f_obj.bbox_max)
    radius = radius_scale * 0.5 * float(np.linalg.norm(f_obj.bbox_max - f_obj.bbox_min))
    views = []
    for d in octahedron_directions():
        pose = look_at(center + radius * d, center)
        rr = fd.render_view(f_obj, None, cam, pose)
        gray = ft.luma(rr.rgb)
        kps = ft.detect_keypoints(gray, max_n=max_keypoints, nms_radius=nms_radius)
        uvs, descs, pts = [], [], []
        inv_pose = inverse(pose)
        half = ft.PATCH // 2
        for kp in kps:
            u, v = int(kp.position[0]), int(kp.position[1])
            # cache only keypoints whose whole descriptor patch lies on the
            # object: silhouette patches depend on whatever background the
            # query happens to have and would only feed false matches
            patch_op = rr.opacity[v - half : v + half, u - half : u + half]
            if patch_op.size == 0 or patch_op.min() < 0.5:
                continue
            t = rr.depth[v, u]
            ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            ray /= np.linalg.norm(ray)
            x_obj = transform_points(inv_pose, (t * ray)[None, :])[0]
            uvs.append(kp.position)
            descs.append(ft.describe(gray, kp.position))
            pts.append(x_obj)
        views.append(
            CanonicalView(
                image=gray,
                pose=pose,
                keypoints_uv=np.array(uvs) if uvs else np.zeros((0, 2)),
                descriptors=np.array(descs) if descs else np.zeros((0, ft.DESCRIPTOR_DIM)),
                points3d=np.array(pts) if pts else np.zeros((0, 3)),
            )
        )
    return ReferenceBundle(views=views, camera=cam)


def fill_map_descriptors(omap: fd.ObjectMap, bundle: ReferenceBundle) -> None:
    """Cache a descriptor per map point from the first canonical view where
    the point lifts to a valid, in-margin pixel.  Points never seen keep the
    zero descriptor (they match nothing)."""
    cam = bundle.camera
    done = np.zeros(len(omap), dtype=bool)
    for view in bundle.views:
        if done.all():
            break
        xc = transform_points(view.pose, omap.points)
        ok = xc[:, 2] > 1e-6
        z = np.where(ok, xc[:, 2], 1.0)
        u = cam.fx * xc[:, 0] / z + cam.cx
        v = cam.fy * xc[:, 1] / z + cam.cy
        margin = ft.KEYPOINT_MARGIN
        ok &= (u >= margin) & (u <= cam.width - margin) & (v >= margin) & (v <= cam.height - margin)
        for i in np.nonzero(ok & ~done)[0]:
            try:
                omap.descriptors[i] = ft.describe(view.image, (u[i], v[i]))
            except ft.OutOfBounds:
                continue
            done[i] = True


def cold_localize(
    query_gray: np.ndarray,
    bundle: ReferenceBundle,
    cam: Camera,
    cfg: ColdStartConfig,
    seed: int | None = None,
) -> PnPResult:
    """Detect, describe, match against every canonical view, pool the 2D-3D
    correspondences, and solve PnP-RANSAC.  Success requires at least
    ``cfg.min_inliers`` inliers at RMS <= ``cfg.inlier_px``."""
    kps = ft.detect_keypoints(query_gray, max_n=cfg.max_keypoints, nms_radius=cfg.nms_radius)
    if len(kps) < 4:
        raise ColdStartFailed(f"only {len(kps)} query keypoints")
    qdesc = ft.descriptor_matrix(query_gray, kps)
    quv = np.array([kp.position for kp in kps])

    uv_pool, pts_pool, dist_pool = [], [], []
    for view in bundle.views:
        if view.descriptors.shape[0] == 0:
            continue
        sim = qdesc @ view.descriptors.T
        for qi, ri in match(qdesc, view.descriptors, cfg.ratio):
            uv_pool.append(quv[qi])
            pts_pool.append(view.points3d[ri])
            dist_pool.append(math.sqrt(max(0.0, 2.0 - 2.0 * sim[qi, ri])))
    if len(uv_pool) < 4:
        raise ColdStartFailed(f"only {len(uv_pool)} pooled correspondences")
    try:
        result = pnp_ransac(
            np.array(uv_pool),
            np.array(pts_pool),
            cam,
            max_iters=cfg.ransac_iters,
            inlier_px=cfg.inlier_px,
            seed=cfg.seed if seed is None else seed,
            quality=np.array(dist_pool),
        )
    except (TooFewCorrespondences, NoConsensus) as e:
        raise ColdStartFailed(str(e)) from e
    if result.inlier_count < cfg.min_inliers or result.rms > cfg.inlier_px:
        raise ColdStartFailed(
            f"{result.inlier_count} inliers at rms {result.rms:.2f} px below the accept bar",
            best=result,
        )
    return result
