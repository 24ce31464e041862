"""Deterministic multi-scale image features.

A pyramid level carries three channels per pixel: Gaussian-smoothed
intensity and its central-difference x/y gradients (unit pixel spacing,
so gradients of a [0,1] image stay within [-1, 1]).  Coarser levels come
from 2x area-downsampling the smoothed image, so sizes follow
``H_{l+1} = ceil(H_l / 2)``.

Keypoints for the cold-start path use a Harris detector and a bias-gain
normalized 16x16 patch descriptor pooled to 64 dimensions.  None of this
is learned; everything is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

BLUR_SIGMA = 1.0
HARRIS_K = 0.04
KEYPOINT_MARGIN = 8
PATCH = 16  # descriptor patch side
DESCRIPTOR_DIM = 64


class ImageTooSmall(ValueError):
    """Image below the 32-pixel minimum for pyramid extraction."""


class OutOfBounds(ValueError):
    """Sample or patch position outside the valid image region."""


@dataclass(frozen=True)
class PyramidLevel:
    features: np.ndarray  # (H, W, C)
    scale: float          # full-res pixels per texel (2**level)
    weight: float = 1.0   # per-level uncertainty weight


@dataclass(frozen=True)
class FeaturePyramid:
    levels: list[PyramidLevel]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


@dataclass
class Keypoint:
    position: np.ndarray        # subpixel (x, y)
    response: float
    descriptor: np.ndarray | None = None


def _downsample2(img: np.ndarray) -> np.ndarray:
    """2x area downsample; odd sizes are edge-padded first (ceil semantics)."""
    h, w = img.shape
    if h % 2:
        img = np.concatenate([img, img[-1:, :]], axis=0)
    if w % 2:
        img = np.concatenate([img, img[:, -1:]], axis=1)
    return img.reshape(img.shape[0] // 2, 2, img.shape[1] // 2, 2).mean(axis=(1, 3))


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luminance of an (H, W, 3) image in [0, 1]."""
    img = np.asarray(rgb, dtype=np.float64)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def extract_pyramid(image: np.ndarray, levels: int = 3) -> FeaturePyramid:
    """Build the feature pyramid of a grayscale image in [0, 1].

    Per level: Gaussian blur (sigma 1.0), central-difference gradients,
    then 2x area downsample of the blurred image feeds the next level.
    Bit-deterministic for identical inputs.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ImageTooSmall(f"{img.shape[1]}x{img.shape[0]} below 32x32 minimum")
    out = []
    cur = img
    for lvl in range(levels):
        blurred = ndimage.gaussian_filter(cur, BLUR_SIGMA, mode="nearest")
        gy, gx = np.gradient(blurred)
        out.append(
            PyramidLevel(
                features=np.ascontiguousarray(np.stack([blurred, gx, gy], axis=-1)),
                scale=float(2**lvl),
            )
        )
        cur = _downsample2(blurred)
    return FeaturePyramid(levels=out)


def sample_feature(pyr: FeaturePyramid, level: int, pt) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear feature value and its analytic spatial derivative at ``pt``.

    ``pt`` is (x, y) in the level's own pixel coordinates and must keep a
    1-pixel margin from the border.  Returns ``(value (C,), grad (C, 2))``
    where grad columns are d/dx and d/dy.
    """
    x, y = float(pt[0]), float(pt[1])
    feats = pyr.levels[level].features
    h, w = feats.shape[:2]
    if not (1.0 <= x <= w - 2.0 and 1.0 <= y <= h - 2.0):
        raise OutOfBounds(f"({x:.2f}, {y:.2f}) outside [1, {w - 2}] x [1, {h - 2}]")
    vals, grads, _ = sample_features_batch(feats, np.array([[x, y]]))
    return vals[0], grads[0]


def sample_features_batch(feats: np.ndarray, pts: np.ndarray):
    """Vectorized bilinear sampling with analytic gradients.

    Returns ``(values (N,C), grads (N,C,2), valid (N,))``; rows outside the
    1-pixel margin are flagged invalid (values/grads zeroed), not raised.
    """
    h, w = feats.shape[:2]
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    valid = (x >= 1.0) & (x <= w - 2.0) & (y >= 1.0) & (y <= h - 2.0)
    xs = np.where(valid, x, 1.0)
    ys = np.where(valid, y, 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.minimum(x0, w - 2)
    y0 = np.minimum(y0, h - 2)
    ax = (xs - x0)[:, None]
    ay = (ys - y0)[:, None]
    f00 = feats[y0, x0]
    f01 = feats[y0, x0 + 1]
    f10 = feats[y0 + 1, x0]
    f11 = feats[y0 + 1, x0 + 1]
    top = f00 + ax * (f01 - f00)
    bot = f10 + ax * (f11 - f10)
    values = top + ay * (bot - top)
    ddx = (f01 - f00) + ay * ((f11 - f10) - (f01 - f00))
    ddy = bot - top
    grads = np.stack([ddx, ddy], axis=-1)
    values[~valid] = 0.0
    grads[~valid] = 0.0
    return values, grads, valid


def detect_keypoints(image: np.ndarray, max_n: int, nms_radius: int) -> list[Keypoint]:
    """Harris corners with greedy Chebyshev non-maximum suppression.

    Candidates are 3x3 local maxima of the Harris response (k=0.04,
    sigma-1.0 window) above a small absolute floor, ordered by response
    descending (ties: y then x), greedily accepted while at least
    ``nms_radius`` away from every earlier acceptance in Chebyshev
    distance.  At most ``max_n`` keypoints; possibly fewer.
    """
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    sxx = ndimage.gaussian_filter(gx * gx, BLUR_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, BLUR_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, BLUR_SIGMA, mode="nearest")
    resp = sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2

    h, w = img.shape
    local_max = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
    mask = local_max & (resp > 1e-9)
    mask[:KEYPOINT_MARGIN, :] = False
    mask[h - KEYPOINT_MARGIN:, :] = False
    mask[:, :KEYPOINT_MARGIN] = False
    mask[:, w - KEYPOINT_MARGIN:] = False
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return []
    rs = resp[ys, xs]
    order = np.lexsort((xs, ys, -rs))
    ys, xs, rs = ys[order], xs[order], rs[order]

    kept: list[Keypoint] = []
    kept_xy = np.empty((0, 2), dtype=np.int64)
    for yi, xi, ri in zip(ys, xs, rs):
        if kept_xy.shape[0]:
            cheb = np.max(np.abs(kept_xy - np.array([xi, yi])), axis=1)
            if cheb.min() < nms_radius:
                continue
        kept.append(Keypoint(position=np.array([float(xi), float(yi)]), response=float(ri)))
        kept_xy = np.vstack([kept_xy, [xi, yi]])
        if len(kept) >= max_n:
            break
    return kept


def describe(image: np.ndarray, kp_position) -> np.ndarray:
    """64-d descriptor of the 16x16 patch around a keypoint position.

    Bias-gain normalized (mean removed, divided by std + 1e-6), 2x2
    area-pooled to 8x8, flattened and L2-normalized.  A perfectly
    textureless patch yields the zero vector, which matches nothing.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = int(round(float(kp_position[0])))
    y = int(round(float(kp_position[1])))
    half = PATCH // 2
    if not (half <= x <= w - half and half <= y <= h - half):
        raise OutOfBounds(f"patch at ({x}, {y}) exceeds the {half}-pixel margin")
    patch = img[y - half : y + half, x - half : x + half]
    patch = (patch - patch.mean()) / (patch.std() + 1e-6)
    pooled = patch.reshape(8, 2, 8, 2).mean(axis=(1, 3))
    d = pooled.ravel()
    n = np.linalg.norm(d)
    if n < 1e-12:
        return np.zeros(DESCRIPTOR_DIM)
    return d / n


def descriptor_matrix(image: np.ndarray, keypoints: list[Keypoint]) -> np.ndarray:
    """Describe every keypoint (in place) and stack the descriptors."""
    if not keypoints:
        return np.zeros((0, DESCRIPTOR_DIM))
    rows = []
    for kp in keypoints:
        kp.descriptor = describe(image, kp.position)
        rows.append(kp.descriptor)
    return np.stack(rows)
