"""Rigid transforms on SE(3), pinhole cameras, and projection Jacobians.

Conventions used across the package:

* A :class:`Pose` maps object-frame points to camera-frame points,
  ``x_cam = R x_obj + t``.
* Rotations are stored as unit quaternions ``(w, x, y, z)`` and are
  renormalized after every operation, so accumulated updates can never
  drift off the rotation manifold.
* Twists are 6-vectors ordered ``(wx, wy, wz, vx, vy, vz)`` (rotation
  first).  Optimizers apply them left-multiplicatively:
  ``pose_new = exp(delta) * pose``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
DEPTH_EPS = 1e-6


class PointBehindCamera(ValueError):
    """Raised when projecting a point at or behind the camera plane."""


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion ``q = (w,x,y,z)`` plus translation ``t``.

    The quaternion is normalized on construction; a zero quaternion is
    rejected.  Instances are immutable and safe to share between threads.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4).copy()
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        n = math.sqrt(float(q @ q))
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        if abs(n - 1.0) > 1e-12:  # idempotent: renormalizing a unit q is a no-op
            q /= n
        if q[0] < 0.0:  # canonical sign: w >= 0
            q = -q
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        """3x3 rotation matrix of this pose's quaternion."""
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the object frame: ``-R^T t``."""
        return -self.rotation_matrix().T @ self.t


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics.  Focal lengths and principal point in pixels.

    Derived crop cameras may carry a principal point outside the image
    rectangle; scene files are validated more strictly at parse time.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image size must be positive")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    def scaled(self, factor: float) -> "Camera":
        """Intrinsics for the same rays sampled at ``1/factor`` resolution.

        Uses the pixel-center convention ``u_level = (u + 0.5)/factor - 0.5``
        so that feature-pyramid levels and scaled cameras agree exactly.
        """
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=int(math.ceil(self.width / factor)),
            height=int(math.ceil(self.height / factor)),
        )


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector ``v`` by unit quaternion ``q``."""
    w = q[0]
    u = q[1:]
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) from a rotation matrix (Shepperd's method)."""
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def pose_from_matrix(m: np.ndarray) -> Pose:
    return Pose(quat_from_matrix(np.asarray(m)[:3, :3]), np.asarray(m)[:3, 3])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at ``eye`` whose optical axis points at ``target``.

    ``up`` picks the roll; if it is (near) parallel to the view direction a
    fixed fallback axis is used, keeping the construction total and
    deterministic.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z /= nz
    u = np.asarray(up, dtype=np.float64).reshape(3)
    x = np.cross(u, z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        if np.linalg.norm(x) < 1e-6:
            x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(quat_from_matrix(r), -r @ eye)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# SE(3) operations
# ---------------------------------------------------------------------------

def exp(twist) -> Pose:
    """Exponential map of a twist ``(w, v)`` onto SE(3).

    Rotation is the Rodrigues exponential of ``w``; translation is
    ``V(w) v`` with the SE(3) left Jacobian ``V``.  Below ``SMALL_ANGLE``
    both factors switch to their second-order series, so the map is smooth
    through zero.
    """
    xi = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist must be finite")
    w = xi[:3]
    v = xi[3:]
    theta = math.sqrt(float(w @ w))
    wx = _skew(w)
    if theta < SMALL_ANGLE:
        # second-order series for both the quaternion and V
        q = np.array([1.0 - theta * theta / 8.0, *(0.5 * (1.0 - theta * theta / 24.0) * w)])
        vmat = np.eye(3) + 0.5 * wx + (wx @ wx) / 6.0
    else:
        half = 0.5 * theta
        q = np.concatenate([[math.cos(half)], (math.sin(half) / theta) * w])
        a = (1.0 - math.cos(theta)) / (theta * theta)
        b = (theta - math.sin(theta)) / (theta * theta * theta)
        vmat = np.eye(3) + a * wx + b * (wx @ wx)
    return Pose(q, vmat @ v)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    return Pose(quat_mul(a.q, b.q), quat_rotate(a.q, b.t) + a.t)


def inverse(p: Pose) -> Pose:
    qc = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose(qc, -quat_rotate(qc, p.t))


def transform_point(p: Pose, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(3)
    return quat_rotate(p.q, x) + p.t


def transform_points(p: Pose, xs: np.ndarray) -> np.ndarray:
    """Batched ``transform_point`` for an (N, 3) array."""
    xs = np.asarray(xs, dtype=np.float64)
    return xs @ p.rotation_matrix().T + p.t


def rotation_angle(p: Pose) -> float:
    """Rotation angle of the pose, radians in [0, pi]."""
    return 2.0 * math.atan2(float(np.linalg.norm(p.q[1:])), abs(float(p.q[0])))


def relative_rotation_angle(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, radians.

    Computed from the relative quaternion with atan2, which is well
    conditioned at small angles, unlike the acos-of-dot form; identical
    quaternions short-circuit to exactly zero.
    """
    if np.array_equal(a.q, b.q):
        return 0.0
    qc = np.array([a.q[0], -a.q[1], -a.q[2], -a.q[3]])
    rel = quat_mul(qc, b.q)
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(cam: Camera, x_cam) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel coordinates.

    Raises :class:`PointBehindCamera` when ``z <= DEPTH_EPS``.
    """
    x = np.asarray(x_cam, dtype=np.float64).reshape(3)
    if x[2] <= DEPTH_EPS:
        raise PointBehindCamera(f"z = {x[2]:.3g}")
    return np.array([cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])


def project_points(cam: Camera, xs_cam: np.ndarray):
    """Batched projection.  Returns ``(uv, in_front)``; rows with
    ``in_front == False`` hold garbage and must be masked by the caller."""
    xs = np.asarray(xs_cam, dtype=np.float64)
    z = xs[:, 2]
    in_front = z > DEPTH_EPS
    zs = np.where(in_front, z, 1.0)
    uv = np.empty((xs.shape[0], 2))
    uv[:, 0] = cam.fx * xs[:, 0] / zs + cam.cx
    uv[:, 1] = cam.fy * xs[:, 1] / zs + cam.cy
    return uv, in_front


def projection_jacobian(cam: Camera, x_cam) -> np.ndarray:
    """2x3 derivative of the pixel coordinates w.r.t. the camera-frame point."""
    x = np.asarray(x_cam, dtype=np.float64).reshape(3)
    if x[2] <= DEPTH_EPS:
        raise PointBehindCamera(f"z = {x[2]:.3g}")
    iz = 1.0 / x[2]
    return np.array(
        [
            [cam.fx * iz, 0.0, -cam.fx * x[0] * iz * iz],
            [0.0, cam.fy * iz, -cam.fy * x[1] * iz * iz],
        ]
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

POSE_CSV_FIELDS = ("qw", "qx", "qy", "qz", "tx", "ty", "tz")


def pose_to_csv_fields(p: Pose) -> list[str]:
    """Pose as CSV fields qw,qx,qy,qz,tx,ty,tz at full (17 digit) precision."""
    return [f"{v:.17g}" for v in (*p.q, *p.t)]


def pose_from_csv_fields(fields) -> Pose:
    vals = [float(f) for f in fields]
    if len(vals) != 7:
        raise ValueError(f"expected 7 pose fields, got {len(vals)}")
    return Pose(np.array(vals[:4]), np.array(vals[4:]))
