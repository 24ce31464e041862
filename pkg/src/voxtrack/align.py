"""Feature-metric pose refinement.

Minimizes robustified differences between query-pyramid features and
features of a reference view rendered at the current pose estimate,
evaluated at the projections of the object's 3-D surface points.  The
optimizer is Levenberg-Marquardt over the SE(3) tangent space with
left-multiplicative updates ``pose <- exp(delta) * pose``, run coarse to
fine over pyramid levels, re-rendering the reference once per level.

Occluded or out-of-view points are masked per iteration: visibility comes
from the reference depth map, bounds from the pyramid's sampling margin.
Masked points contribute exactly zero to the normal equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from voxtrack import features as ft
from voxtrack import field as fd
from voxtrack.geometry import Camera, Pose, exp, transform_points

LAMBDA_MAX = 1e6


class TooFewVisible(RuntimeError):
    """Fewer visible points than the configured minimum."""


class Diverged(RuntimeError):
    """No damping value in the configured range reduced the cost."""


@dataclass
class AlignConfig:
    max_iters_per_level: int = 30
    lm_lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    convergence_delta: float = 1e-6
    robust_scale: float | None = None  # None: 0.5 x query feature RMS per level
    min_visible_points: int = 12
    levels: tuple[int, ...] = (2, 1, 0)  # coarse -> fine
    depth_tol: float = 0.05  # scene units, visibility gate against ref depth

    def __post_init__(self):
        if not (
            self.max_iters_per_level > 0
            and self.lm_lambda_init > 0
            and self.convergence_delta > 0
            and self.min_visible_points > 0
            and self.depth_tol > 0
        ):
            raise ValueError("config values must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if len(self.levels) == 0:
            raise ValueError("need at least one pyramid level")
        if self.robust_scale is not None and self.robust_scale <= 0:
            raise ValueError("robust_scale must be positive")


@dataclass
class AlignResult:
    pose: Pose
    converged: bool
    final_cost: float
    iterations: int
    visible_count: int
    mean_residual: float
    # (level, robust cost) after each accepted step, preceded by the
    # level-entry cost; within a level the costs strictly decrease
    cost_trace: list[tuple[int, float]] = dc_field(default_factory=list)


def robust_weight(r_norm: float, tau: float) -> float:
    """Huber IRLS weight: 1 inside the scale, tau/r outside."""
    if r_norm <= tau:
        return 1.0
    return tau / r_norm


def _huber_cost(r_norms: np.ndarray, tau: float) -> np.ndarray:
    out = 0.5 * r_norms**2
    big = r_norms > tau
    out[big] = tau * (r_norms[big] - 0.5 * tau)
    return out


def _level_tau(query_pyr: ft.FeaturePyramid, level: int, cfg: AlignConfig) -> float:
    if cfg.robust_scale is not None:
        return cfg.robust_scale
    feats = query_pyr.levels[level].features
    return 0.5 * float(np.sqrt(np.mean(feats**2)))


def _evaluate(
    query_pyr: ft.FeaturePyramid,
    ref_pyr: ft.FeaturePyramid,
    ref_depth: np.ndarray,
    points_obj: np.ndarray,
    pose: Pose,
    ref_pose: Pose,
    cam: Camera,
    level: int,
    depth_tol: float,
):
    """Residuals plus everything the normal equations need.

    Returns (residuals (M,C), mask (M,), query grads (M,C,2), query camera
    points (M,3)); rows outside the mask are zeroed.
    """
    scale = query_pyr.levels[level].scale
    lcam = cam.scaled(scale)

    vis = fd.visibility_mask(
        None, None, cam, ref_pose, points_obj, depth_tol=depth_tol, depth=ref_depth
    )

    xq = transform_points(pose, points_obj)
    zq = xq[:, 2]
    q_front = zq > 1e-6
    zq_safe = np.where(q_front, zq, 1.0)
    uq = np.stack(
        [lcam.fx * xq[:, 0] / zq_safe + lcam.cx, lcam.fy * xq[:, 1] / zq_safe + lcam.cy], axis=1
    )
    fq, gq, q_ok = ft.sample_features_batch(query_pyr.levels[level].features, uq)

    xr = transform_points(ref_pose, points_obj)
    zr = xr[:, 2]
    r_front = zr > 1e-6
    zr_safe = np.where(r_front, zr, 1.0)
    ur = np.stack(
        [lcam.fx * xr[:, 0] / zr_safe + lcam.cx, lcam.fy * xr[:, 1] / zr_safe + lcam.cy], axis=1
    )
    fr, _, r_ok = ft.sample_features_batch(ref_pyr.levels[level].features, ur)

    mask = vis & q_front & q_ok & r_front & r_ok
    res = fq - fr
    res[~mask] = 0.0
    gq[~mask] = 0.0
    return res, mask, gq, xq


def residuals(
    query_pyr: ft.FeaturePyramid,
    ref_pyr: ft.FeaturePyramid,
    ref_depth: np.ndarray,
    points_obj: np.ndarray,
    pose: Pose,
    ref_pose: Pose,
    cam: Camera,
    level: int,
    depth_tol: float = 0.05,
    min_visible_points: int = 12,
):
    """Feature residuals ``F_q(pi(T_q X)) - F_r(pi(T_r X))`` and their mask.

    Points must pass the reference depth visibility test and sample
    in-bounds in both pyramids.  Raises :class:`TooFewVisible` if fewer
    than ``min_visible_points`` survive.
    """
    res, mask, _, _ = _evaluate(
        query_pyr, ref_pyr, ref_depth, points_obj, pose, ref_pose, cam, level, depth_tol
    )
    count = int(mask.sum())
    if count < min_visible_points:
        raise TooFewVisible(f"{count} visible points < {min_visible_points}")
    return res, mask


def residual_jacobian(point, pose: Pose, cam: Camera, feature_spatial_gradient) -> np.ndarray:
    """C x 6 derivative of one residual w.r.t. the left-multiplicative twist.

    Chain rule: feature gradient (C,2) x projection Jacobian (2,3) x the
    derivative of ``exp(delta) * pose acting on X`` at delta = 0, which is
    ``[-[x_cam]_x | I]`` in (omega, v) ordering.
    """
    from voxtrack.geometry import projection_jacobian, transform_point, _skew

    x_cam = transform_point(pose, point)
    pj = projection_jacobian(cam, x_cam)
    act = np.concatenate([-_skew(x_cam), np.eye(3)], axis=1)
    g = np.asarray(feature_spatial_gradient, dtype=np.float64)
    return g @ pj @ act


def _batch_jacobians(x_cam: np.ndarray, grads: np.ndarray, cam: Camera) -> np.ndarray:
    """(M, C, 6) residual Jacobians for all points at once."""
    m = x_cam.shape[0]
    z = np.where(x_cam[:, 2] > 1e-6, x_cam[:, 2], 1.0)
    iz = 1.0 / z
    pj = np.zeros((m, 2, 3))
    pj[:, 0, 0] = cam.fx * iz
    pj[:, 0, 2] = -cam.fx * x_cam[:, 0] * iz * iz
    pj[:, 1, 1] = cam.fy * iz
    pj[:, 1, 2] = -cam.fy * x_cam[:, 1] * iz * iz
    act = np.zeros((m, 3, 6))
    # -skew(x_cam) block
    act[:, 0, 1] = x_cam[:, 2]
    act[:, 0, 2] = -x_cam[:, 1]
    act[:, 1, 0] = -x_cam[:, 2]
    act[:, 1, 2] = x_cam[:, 0]
    act[:, 2, 0] = x_cam[:, 1]
    act[:, 2, 1] = -x_cam[:, 0]
    act[:, 0, 3] = 1.0
    act[:, 1, 4] = 1.0
    act[:, 2, 5] = 1.0
    return np.einsum("mcp,mpq->mcq", grads, np.einsum("mpq,mqr->mpr", pj, act))


def _masked_cost(res: np.ndarray, mask: np.ndarray, tau: float) -> float:
    norms = np.linalg.norm(res[mask], axis=1)
    return float(np.mean(_huber_cost(norms, tau)))


RenderFn = Callable[[Pose, int, np.ndarray], tuple[ft.FeaturePyramid, np.ndarray, Pose]]


def refine(
    query_pyr: ft.FeaturePyramid,
    render_fn: RenderFn,
    points_obj: np.ndarray,
    init_pose: Pose,
    cam: Camera,
    cfg: AlignConfig,
) -> AlignResult:
    """Coarse-to-fine robust LM refinement against dynamic references.

    ``render_fn(pose, level, projected_uv)`` must return a reference
    feature pyramid (at least ``level + 1`` levels deep), a full-resolution
    depth map, and the pose the reference was actually rendered at (the
    requested pose for dynamic references; a canonical pose when dynamic
    rendering is disabled).  The projected full-resolution pixel positions
    of the candidate points let the renderer restrict itself to a sparse
    dilated pixel set.  A single reference is used per level; features are
    never aggregated across references.
    """
    pose = init_pose
    total_iters = 0
    finest_converged = False
    final_cost = math.nan
    visible = 0
    mean_residual = math.nan
    trace: list[tuple[int, float]] = []

    for level in cfg.levels:
        xq = transform_points(pose, points_obj)
        uv_full = np.zeros((points_obj.shape[0], 2))
        front = xq[:, 2] > 1e-6
        zs = np.where(front, xq[:, 2], 1.0)
        uv_full[:, 0] = cam.fx * xq[:, 0] / zs + cam.cx
        uv_full[:, 1] = cam.fy * xq[:, 1] / zs + cam.cy
        inside = (
            front
            & (uv_full[:, 0] >= 0)
            & (uv_full[:, 0] <= cam.width - 1)
            & (uv_full[:, 1] >= 0)
            & (uv_full[:, 1] <= cam.height - 1)
        )
        if int(inside.sum()) < cfg.min_visible_points:
            raise TooFewVisible(
                f"{int(inside.sum())} projected points in frame < {cfg.min_visible_points}"
            )
        ref_pyr, ref_depth, ref_pose = render_fn(pose, level, uv_full[inside])
        tau = _level_tau(query_pyr, level, cfg)

        lam = cfg.lm_lambda_init
        level_converged = False
        for _ in range(cfg.max_iters_per_level):
            total_iters += 1
            res, mask, gq, xq_cur = _evaluate(
                query_pyr, ref_pyr, ref_depth, points_obj, pose, ref_pose, cam, level,
                cfg.depth_tol,
            )
            count = int(mask.sum())
            if count < cfg.min_visible_points:
                raise TooFewVisible(f"{count} visible points < {cfg.min_visible_points}")
            norms = np.linalg.norm(res, axis=1)
            weights = np.where(norms <= tau, 1.0, tau / np.maximum(norms, 1e-300))
            weights[~mask] = 0.0
            cost = _masked_cost(res, mask, tau)
            if total_iters == 1 or not trace or trace[-1][0] != level:
                trace.append((level, cost))
            jac = _batch_jacobians(xq_cur, gq, cam.scaled(query_pyr.levels[level].scale))
            wj = jac * weights[:, None, None]
            hess = np.einsum("mci,mcj->ij", wj, jac)
            grad = np.einsum("mci,mc->i", wj, res)

            accepted = False
            while lam <= LAMBDA_MAX:
                damped = hess + lam * np.diag(np.maximum(np.diag(hess), 1e-12))
                try:
                    delta = np.linalg.solve(damped, -grad)
                except np.linalg.LinAlgError:
                    lam *= cfg.lambda_up
                    continue
                if np.linalg.norm(delta) < cfg.convergence_delta:
                    level_converged = True
                    accepted = True
                    break
                cand = compose_update(delta, pose)
                cand_res, cand_mask, _, _ = _evaluate(
                    query_pyr, ref_pyr, ref_depth, points_obj, cand, ref_pose, cam, level,
                    cfg.depth_tol,
                )
                if int(cand_mask.sum()) >= cfg.min_visible_points:
                    cand_cost = _masked_cost(cand_res, cand_mask, tau)
                    if cand_cost < cost:
                        pose = cand
                        lam = max(lam * cfg.lambda_down, 1e-12)
                        accepted = True
                        trace.append((level, cand_cost))
                        break
                lam *= cfg.lambda_up
            if not accepted:
                raise Diverged(f"no damping in [{cfg.lm_lambda_init:g}, {LAMBDA_MAX:g}] helped")
            assert abs(float(pose.q @ pose.q) - 1.0) < 1e-9  # manifold invariant
            if level_converged:
                break

        if level == cfg.levels[-1]:
            finest_converged = level_converged
            res, mask, _, _ = _evaluate(
                query_pyr, ref_pyr, ref_depth, points_obj, pose, ref_pose, cam, level,
                cfg.depth_tol,
            )
            visible = int(mask.sum())
            final_cost = _masked_cost(res, mask, tau) if visible else math.nan
            mean_residual = (
                float(np.linalg.norm(res[mask], axis=1).mean()) if visible else math.inf
            )

    return AlignResult(
        pose=pose,
        converged=finest_converged,
        final_cost=final_cost,
        iterations=total_iters,
        visible_count=visible,
        mean_residual=mean_residual,
        cost_trace=trace,
    )


def compose_update(delta: np.ndarray, pose: Pose) -> Pose:
    """Left-multiplicative manifold update ``exp(delta) * pose``."""
    from voxtrack.geometry import compose

    return compose(exp(delta), pose)
