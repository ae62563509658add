"""Rotation and interpolation primitives.

Conventions used throughout the package:

* quaternions are numpy arrays ``[w, x, y, z]`` rotating local vectors into
  the world frame (``v_world = R(q) @ v_local``);
* the world frame is right-handed with +z up;
* the head frame looks along its local +x axis, +y to the left, +z up;
* angles are radians internally, degrees only at report boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline


class DegenerateInput(ValueError):
    pass


class InsufficientKnots(ValueError):
    pass


class OutOfRange(ValueError):
    pass


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateInput("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a, b):
    """Hamilton product, broadcasting over leading dimensions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_exp(rotvec):
    """Quaternion for a rotation vector (axis * angle), batched."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x without dividing by zero near the identity
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion (shortest arc), batched."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return k * v


def rotate(q, v):
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(r):
    """Shepperd's method; returns w >= 0. Batched over leading dims."""
    r = np.asarray(r, dtype=float)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(r.shape[:-2] + (4,))


def rot_to_6d(r):
    """First two columns of a rotation matrix, column-first: ``[c0, c1]``."""
    r = np.asarray(r, dtype=float)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def sixd_to_rot(v):
    """Gram-Schmidt recovery of a rotation matrix from a 6D vector (batched)."""
    v = np.asarray(v, dtype=float)
    a = v[..., 0:3]
    b = v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= 1e-6):
        raise DegenerateInput("first 6D column has near-zero norm")
    c0 = a / na
    b = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb <= 1e-6):
        raise DegenerateInput("6D columns are (nearly) parallel")
    c1 = b / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def quat_to_6d(q):
    return rot_to_6d(quat_to_matrix(q))


def quat_angle_diff(a, b):
    """Angle of the difference rotation in degrees: 2 acos(|a . b|)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.clip(np.abs(np.sum(a * b, axis=-1)), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(d))


def random_quats(rng: np.random.Generator, n: int):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def slerp(q0, q1, s):
    """Spherical interpolation q0 -> q1 at parameter(s) s, shortest path."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    s = np.asarray(s, dtype=float)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_t = np.sin(theta)
    near = sin_t < 1e-9
    safe = np.where(near, 1.0, sin_t)
    w0 = np.where(near, 1.0 - s, np.sin((1.0 - s) * theta) / safe)
    w1 = np.where(near, s, np.sin(s * theta) / safe)
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", normalize(np.asarray(self.orientation, dtype=float).reshape(4)))

    @property
    def matrix(self):
        return quat_to_matrix(self.orientation)


def cubic_resample(times, positions, quats, target_times):
    """Resample a pose stream onto new timestamps.

    Positions follow a not-a-knot cubic spline per coordinate, which
    reproduces polynomials up to degree 3 exactly. Orientations are
    slerped between the bracketing knots with a smoothstep-eased parameter.
    Returns ``(positions (M, 3), quats (M, 4))``.
    """
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    quats = np.asarray(quats, dtype=float)
    target_times = np.asarray(target_times, dtype=float)
    if len(times) < 4:
        raise InsufficientKnots(f"need at least 4 poses, got {len(times)}")
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    if target_times.size and (target_times.min() < times[0] or target_times.max() > times[-1]):
        raise OutOfRange(
            f"targets [{target_times.min()}, {target_times.max()}] outside knots [{times[0]}, {times[-1]}]")

    spline = CubicSpline(times, positions, axis=0, bc_type="not-a-knot")
    pos = spline(target_times)

    idx = np.clip(np.searchsorted(times, target_times, side="right") - 1, 0, len(times) - 2)
    t0 = times[idx]
    u = (target_times - t0) / (times[idx + 1] - t0)
    u = u * u * (3.0 - 2.0 * u)
    rot = slerp(quats[idx], quats[idx + 1], u)

    # knots are reproduced exactly, not approximately
    exact = np.searchsorted(times, target_times)
    exact = np.clip(exact, 0, len(times) - 1)
    hit = times[exact] == target_times
    pos[hit] = positions[exact[hit]]
    rot[hit] = quats[exact[hit]]
    return pos, rot
