"""SE(3) / se(3) kernels on homogeneous 4x4 matrices and 6-vector twists.

Conventions
-----------
* A pose is a 4x4 homogeneous matrix ``[[R, t], [0, 1]]`` (float64).
* A twist is a 6-vector ``(omega, rho)``: angular part first, then linear part.
* ``hat(xi) = [[skew(omega), rho], [0, 0]]``.

Every function accepts leading batch dimensions, so ``exp_map`` of an
``(n, 6)`` array returns ``(n, 4, 4)``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import CutLocusError, InvalidArgument

# Below this angle, Rodrigues / Jacobian coefficients switch to Taylor series.
SMALL_ANGLE = 1e-8
# Distance from pi at which the logarithm is refused.
CUT_LOCUS_MARGIN = 1e-6
SKEW_TOL = 1e-9


def _as_float(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} has non-finite entries")
    return arr


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def hat(xi) -> np.ndarray:
    """Twist ``(..., 6)`` to its 4x4 matrix form."""
    xi = _as_float(xi, "twist")
    if xi.shape[-1] != 6:
        raise InvalidArgument(f"twist must have 6 components, got shape {xi.shape}")
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def vee(m) -> np.ndarray:
    """Inverse of :func:`hat`; rejects matrices that are not in se(3)."""
    m = _as_float(m, "twist matrix")
    if m.shape[-2:] != (4, 4):
        raise InvalidArgument(f"expected (..., 4, 4), got {m.shape}")
    block = m[..., :3, :3]
    if np.any(np.abs(block + np.swapaxes(block, -1, -2)) > SKEW_TOL):
        raise InvalidArgument("rotation block is not skew-symmetric")
    if np.any(m[..., 3, :] != 0.0):
        raise InvalidArgument("last row of a twist matrix must be zero")
    out = np.empty(m.shape[:-2] + (6,))
    out[..., 0] = m[..., 2, 1]
    out[..., 1] = m[..., 0, 2]
    out[..., 2] = m[..., 1, 0]
    out[..., 3:] = m[..., :3, 3]
    return out


def _exp_coefficients(theta: np.ndarray):
    """sin(th)/th, (1-cos th)/th^2, (th-sin th)/th^3 with small-angle series."""
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    th2 = theta * theta
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(th) / th)
    half = np.sin(th / 2.0) / th
    b = np.where(small, 0.5 - th2 / 24.0, 2.0 * half * half)
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0, (th - np.sin(th)) / (th * th * th))
    return a, b, c


def so3_exp(omega) -> np.ndarray:
    omega = _as_float(omega, "rotation vector")
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _exp_coefficients(theta)
    k = skew(omega)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_angle(rot) -> np.ndarray:
    """Angle in [0, pi] of rotation matrices ``(..., 3, 3)``."""
    rot = np.asarray(rot, dtype=np.float64)
    w = np.stack(
        [rot[..., 2, 1] - rot[..., 1, 2],
         rot[..., 0, 2] - rot[..., 2, 0],
         rot[..., 1, 0] - rot[..., 0, 1]],
        axis=-1,
    )
    s = 0.5 * np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(rot, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def so3_log(rot) -> np.ndarray:
    """Rotation vector of ``(..., 3, 3)`` rotations; raises near angle pi."""
    rot = _as_float(rot, "rotation")
    w = np.stack(
        [rot[..., 2, 1] - rot[..., 1, 2],
         rot[..., 0, 2] - rot[..., 2, 0],
         rot[..., 1, 0] - rot[..., 0, 1]],
        axis=-1,
    )
    s = 0.5 * np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(rot, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    worst = float(np.max(theta)) if theta.size else 0.0
    if worst > math.pi - CUT_LOCUS_MARGIN:
        raise CutLocusError(worst)
    small = theta < SMALL_ANGLE
    s_safe = np.where(small, 1.0, s)
    factor = np.where(small, 0.5 + theta * theta / 12.0, 0.5 * theta / s_safe)
    return factor[..., None] * w


def exp_map(xi) -> np.ndarray:
    """Exponential of twists ``(..., 6)`` as poses ``(..., 4, 4)``."""
    xi = _as_float(xi, "twist")
    omega, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    a, b, c = _exp_coefficients(theta)
    k = skew(omega)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    rot = eye + a[..., None, None] * k + b[..., None, None] * k2
    jac = eye + b[..., None, None] * k + c[..., None, None] * k2
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = rot
    out[..., :3, 3] = np.einsum("...ij,...j->...i", jac, rho)
    out[..., 3, 3] = 1.0
    return out


def log_map(pose) -> np.ndarray:
    """Logarithm of poses ``(..., 4, 4)`` as twists ``(..., 6)``."""
    pose = _as_float(pose, "pose")
    omega = so3_log(pose[..., :3, :3])
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    # coefficient of K^2 in the inverse left Jacobian
    d = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        (1.0 - th * np.sin(th) / (4.0 * np.sin(th / 2.0) ** 2)) / (th * th),
    )
    k = skew(omega)
    eye = np.broadcast_to(np.eye(3), k.shape)
    jinv = eye - 0.5 * k + d[..., None, None] * (k @ k)
    out = np.empty(pose.shape[:-2] + (6,))
    out[..., :3] = omega
    out[..., 3:] = np.einsum("...ij,...j->...i", jinv, pose[..., :3, 3])
    return out


def make_pose(rot=None, trans=None) -> np.ndarray:
    out = np.eye(4)
    if rot is not None:
        out[:3, :3] = rot
    if trans is not None:
        out[:3, 3] = trans
    return out


def translation(x: float, y: float, z: float) -> np.ndarray:
    return make_pose(trans=(x, y, z))


def rot_x(angle: float) -> np.ndarray:
    return exp_map([angle, 0, 0, 0, 0, 0])


def rot_y(angle: float) -> np.ndarray:
    return exp_map([0, angle, 0, 0, 0, 0])


def rot_z(angle: float) -> np.ndarray:
    return exp_map([0, 0, angle, 0, 0, 0])


def inverse(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    rt = np.swapaxes(pose[..., :3, :3], -1, -2)
    out = np.zeros_like(pose)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, pose[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def compose(*poses) -> np.ndarray:
    out = np.asarray(poses[0], dtype=np.float64)
    for p in poses[1:]:
        out = out @ p
    return out


def transform_points(pose, points) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return np.asarray(points) @ pose[:3, :3].T + pose[:3, 3]


def is_pose(pose, tol: float = 1e-9) -> bool:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2:] != (4, 4) or not np.all(np.isfinite(pose)):
        return False
    rot = pose[..., :3, :3]
    ortho = rot @ np.swapaxes(rot, -1, -2) - np.eye(3)
    return bool(
        np.all(np.abs(ortho) <= tol)
        and np.all(np.abs(np.linalg.det(rot) - 1.0) <= tol)
        and np.all(pose[..., 3, :3] == 0.0)
        and np.all(pose[..., 3, 3] == 1.0)
    )


def geodesic_diff(x, y) -> np.ndarray:
    """``x (-) y``: the spatial twist ``log(x y^-1)`` carrying ``y`` to ``x``."""
    return log_map(np.asarray(x) @ inverse(y))


def geodesic_interp(h0, h1, t) -> np.ndarray:
    """Constant-twist path ``Exp(t log(h1 h0^-1)) h0``.

    ``t`` may be a scalar or an array matching the batch shape of the poses.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidArgument("interpolation parameter must lie in [0, 1]")
    h0 = np.asarray(h0, dtype=np.float64)
    delta = geodesic_diff(h1, h0)
    return exp_map(t[..., None] * delta) @ h0


def adjoint(pose) -> np.ndarray:
    """6x6 matrix with ``hat(adjoint(p) @ xi) == p @ hat(xi) @ p^-1``."""
    pose = np.asarray(pose, dtype=np.float64)
    rot = pose[..., :3, :3]
    out = np.zeros(pose.shape[:-2] + (6, 6))
    out[..., :3, :3] = rot
    out[..., 3:, 3:] = rot
    out[..., 3:, :3] = skew(pose[..., :3, 3]) @ rot
    return out


def ad(xi) -> np.ndarray:
    """Matrix of the Lie bracket ``v -> [xi, v]``."""
    xi = np.asarray(xi, dtype=np.float64)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    w = skew(xi[..., :3])
    out[..., :3, :3] = w
    out[..., 3:, 3:] = w
    out[..., 3:, :3] = skew(xi[..., 3:])
    return out


def bracket(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., :3] = np.cross(a[..., :3], b[..., :3])
    out[..., 3:] = np.cross(a[..., :3], b[..., 3:]) - np.cross(b[..., :3], a[..., 3:])
    return out


def d_geo(pose, pose_true) -> np.ndarray | float:
    """Pose error: sqrt(|Log(R^T R_hat)|^2 + |t_hat - t|^2).

    Radians and meters are summed with unit weight.
    """
    pose = _as_float(pose, "pose")
    pose_true = _as_float(pose_true, "pose")
    rel = np.swapaxes(pose[..., :3, :3], -1, -2) @ pose_true[..., :3, :3]
    rot_err = np.linalg.norm(so3_log(rel), axis=-1)
    trans_err = np.linalg.norm(pose_true[..., :3, 3] - pose[..., :3, 3], axis=-1)
    out = np.sqrt(rot_err * rot_err + trans_err * trans_err)
    return float(out) if out.ndim == 0 else out


def pose_to_row(pose) -> list[float]:
    """Row-major 16-number serialization of a 4x4 pose."""
    return [float(v) for v in np.asarray(pose, dtype=np.float64).reshape(16)]


def pose_from_row(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 16:
        raise InvalidArgument(f"a pose needs 16 numbers, got {arr.size}")
    return arr.reshape(4, 4).copy()


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> np.ndarray:
    """Rotation about a uniform random axis; uniform on SO(3) when max_angle is pi."""
    if max_angle >= math.pi:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_pose(rng: np.random.Generator, max_angle: float = math.pi,
                max_trans: float = 1.0) -> np.ndarray:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = max_trans * rng.uniform() ** (1.0 / 3.0)
    return make_pose(random_rotation(rng, max_angle), direction * radius)
