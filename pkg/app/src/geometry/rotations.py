"""Rotation helpers.

Differentiable conversions are torch functions; representation changes that never
need gradients (Euler <-> axis-angle, rotation averaging) go through
scipy.spatial.transform.Rotation. Quaternions are wxyz everywhere in this package;
scipy's xyzw order is converted at the boundary. Euler angles are intrinsic XYZ,
i.e. R = Rx(a) @ Ry(b) @ Rz(c).
"""

import logging
import math
import warnings
from typing import Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

EULER_ORDER: str = "XYZ"
GIMBAL_TOLERANCE: float = 1e-6


def euler_to_matrix(euler: torch.Tensor) -> torch.Tensor:
    """(..., 3) intrinsic XYZ Euler angles -> (..., 3, 3) rotation matrices."""
    a, b, c = euler.unbind(-1)
    ca, sa = torch.cos(a), torch.sin(a)
    cb, sb = torch.cos(b), torch.sin(b)
    cc, sc = torch.cos(c), torch.sin(c)
    row0 = torch.stack([cb * cc, -cb * sc, sb], dim=-1)
    row1 = torch.stack([ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb], dim=-1)
    row2 = torch.stack([sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) wxyz quaternions (normalized here) -> (..., 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], dim=-1)
    row1 = torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], dim=-1)
    row2 = torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a * b of wxyz quaternions."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def rigid_transform(rotation: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """Packs (..., 3, 3) and (..., 3) into (..., 4, 4) homogeneous transforms."""
    top = torch.cat([rotation, translation.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype, device=top.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def quaternion_angle(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Geodesic rotation angle between wxyz quaternions (sign-invariant)."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = np.abs(np.sum(q0 * q1, axis=-1))
    # atan2 form stays accurate near 0 and pi.
    cross = np.sqrt(np.clip(np.sum(q0 * q0, axis=-1) * np.sum(q1 * q1, axis=-1) - dot * dot, 0.0, None))
    return 2.0 * np.arctan2(cross, dot)


def to_scipy_quat(q_wxyz: np.ndarray) -> np.ndarray:
    q = np.asarray(q_wxyz, dtype=np.float64)
    return np.concatenate([q[..., 1:], q[..., :1]], axis=-1)


def from_scipy_quat(q_xyzw: np.ndarray) -> np.ndarray:
    q = np.asarray(q_xyzw, dtype=np.float64)
    return np.concatenate([q[..., 3:], q[..., :3]], axis=-1)


def euler_to_quaternion(euler: np.ndarray) -> np.ndarray:
    """(..., 3) Euler XYZ -> (..., 4) wxyz quaternions."""
    euler = np.asarray(euler, dtype=np.float64)
    flat = Rotation.from_euler(EULER_ORDER, euler.reshape(-1, 3)).as_quat()
    return from_scipy_quat(flat).reshape(euler.shape[:-1] + (4,))


def quaternion_to_euler(q_wxyz: np.ndarray) -> np.ndarray:
    q = np.asarray(q_wxyz, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        flat = Rotation.from_quat(to_scipy_quat(q.reshape(-1, 4))).as_euler(EULER_ORDER)
    return flat.reshape(q.shape[:-1] + (3,))


def is_gimbal_locked(euler: np.ndarray) -> bool:
    """True when any pitch (middle angle) sits within tolerance of +-pi/2."""
    pitch = np.asarray(euler, dtype=np.float64)[..., 1]
    return bool(np.any(np.abs(np.abs(pitch) - math.pi / 2) <= GIMBAL_TOLERANCE))


def euler_to_axis_angle(euler: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Euler XYZ -> axis-angle (rotation vector).

    Args:
        euler (np.ndarray): (..., 3) finite angles in radians.

    Returns:
        Tuple[np.ndarray, bool]: The (..., 3) rotation vectors and a gimbal-lock flag.

    Raises:
        ValueError: If any angle is not finite.
    """
    euler = np.asarray(euler, dtype=np.float64)
    if not np.all(np.isfinite(euler)):
        raise ValueError("Euler angles must be finite")
    flagged: bool = is_gimbal_locked(euler)
    if flagged:
        logger.warning("Euler input lies in the gimbal-lock region; the rotation is still exact")
    rotvec = Rotation.from_euler(EULER_ORDER, euler.reshape(-1, 3)).as_rotvec()
    return rotvec.reshape(euler.shape), flagged


def axis_angle_to_euler(axis_angle: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Axis-angle -> Euler XYZ. In the gimbal-lock region the last angle is set to zero
    and the representative still reproduces the rotation."""
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    if not np.all(np.isfinite(axis_angle)):
        raise ValueError("axis-angle vectors must be finite")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        euler = Rotation.from_rotvec(axis_angle.reshape(-1, 3)).as_euler(EULER_ORDER)
    euler = euler.reshape(axis_angle.shape)
    flagged: bool = is_gimbal_locked(euler)
    if flagged:
        logger.warning("Converted rotation lies in the gimbal-lock region")
    return euler, flagged


def average_quaternions(quats_wxyz: np.ndarray) -> np.ndarray:
    """Chordal L2 mean rotation of a (N, 4) wxyz set."""
    mean = Rotation.from_quat(to_scipy_quat(np.asarray(quats_wxyz).reshape(-1, 4))).mean()
    return from_scipy_quat(mean.as_quat())
