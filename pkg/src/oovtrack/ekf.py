"""Error-state EKF for wrist orientation from a 6-axis IMU.

The nominal state is a world-from-sensor quaternion; the filter tracks a
3-dim body-frame attitude error ``q_true = q (x) exp(dtheta)``. Gyro drives
the prediction, gravity (when the accelerometer reads close to 1 g) corrects
roll and pitch. There is no magnetometer, so yaw is pure gyro integration.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import geom

GRAVITY = 9.81


class NotQuasiStatic(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class EkfConfig:
    gravity_mag: float = GRAVITY
    q_noise: float = 0.005  # gyro noise density, rad/s/sqrt(Hz)
    r_noise: float = 0.3  # accel measurement sigma, m/s^2
    gate: float = 0.10  # accel update only within +-10% of gravity_mag
    init_tilt_sigma: float = np.radians(10.0)
    init_yaw_sigma: float = np.pi


@dataclass(frozen=True)
class EkfState:
    q: np.ndarray
    cov: np.ndarray
    cfg: EkfConfig = field(default_factory=EkfConfig)

    @property
    def rot(self):
        return geom.quat_to_matrix(self.q)


def initial_cov(q, cfg: EkfConfig):
    """Tilt variance everywhere, large variance about the world vertical."""
    up_body = geom.quat_to_matrix(q).T @ np.array([0.0, 0.0, 1.0])
    p = cfg.init_tilt_sigma**2 * np.eye(3)
    p += (cfg.init_yaw_sigma**2 - cfg.init_tilt_sigma**2) * np.outer(up_body, up_body)
    return p


def ekf_init(first_accel, cfg: EkfConfig | None = None) -> EkfState:
    cfg = cfg or EkfConfig()
    a = np.asarray(first_accel, dtype=float)
    n = np.linalg.norm(a)
    if not 0.5 * cfg.gravity_mag <= n <= 1.5 * cfg.gravity_mag:
        raise NotQuasiStatic(f"|accel| = {n:.3f} m/s^2 is not within 0.5g..1.5g")
    # shortest rotation taking the measured up direction onto world +z (zero yaw)
    u = a / n
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(u, z))
    if c < -1.0 + 1e-12:
        q = np.array([0.0, 1.0, 0.0, 0.0])
    else:
        axis = np.cross(u, z)
        q = geom.normalize(np.concatenate([[1.0 + c], axis]))
    return EkfState(q=q, cov=initial_cov(q, cfg), cfg=cfg)


@njit(cache=True)
def _qmul(a, b):
    return np.array([
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ])


@njit(cache=True)
def _qexp(v):
    theta = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(0.5 * theta) / theta
    return np.array([np.cos(0.5 * theta), k * v[0], k * v[1], k * v[2]])


@njit(cache=True)
def _qmat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@njit(cache=True)
def _step(q, p, accel, gyro, dt, gravity, q_noise, r_noise, gate):
    dq = _qexp(gyro * dt)
    q = _qmul(q, dq)
    q = q / np.sqrt(np.sum(q * q))
    f = _qmat(dq).T
    p = f @ p @ f.T + (q_noise * q_noise * dt) * np.eye(3)

    n = np.sqrt(np.sum(accel * accel))
    if abs(n - gravity) <= gate * gravity:
        r = _qmat(q)
        e = r[2, :] * gravity  # R^T (0, 0, g)
        h = np.array([[0.0, -e[2], e[1]], [e[2], 0.0, -e[0]], [-e[1], e[0], 0.0]])
        s = h @ p @ h.T + r_noise * r_noise * np.eye(3)
        k = np.linalg.solve(s, h @ p).T
        dtheta = k @ (accel - e)
        q = _qmul(q, _qexp(dtheta))
        q = q / np.sqrt(np.sum(q * q))
        ikh = np.eye(3) - k @ h
        # Joseph form keeps P positive semidefinite
        p = ikh @ p @ ikh.T + r_noise * r_noise * (k @ k.T)
    p = 0.5 * (p + p.T)
    return q, p


@njit(cache=True)
def _run(q, p, t, accel, gyro, gravity, q_noise, r_noise, gate):
    out = np.empty((len(t), 4))
    out[0] = q
    for i in range(1, len(t)):
        q, p = _step(q, p, accel[i], gyro[i], t[i] - t[i - 1], gravity, q_noise, r_noise, gate)
        out[i] = q
    return out


def ekf_step(state: EkfState, sample: ImuSample, dt: float) -> EkfState:
    """Gyro prediction followed by a gated gravity-direction update."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    cfg = state.cfg
    q, p = _step(
        np.asarray(state.q, dtype=float), np.asarray(state.cov, dtype=float),
        np.asarray(sample.accel, dtype=float), np.asarray(sample.gyro, dtype=float),
        float(dt), cfg.gravity_mag, cfg.q_noise, cfg.r_noise, cfg.gate)
    return replace(state, q=q, cov=p)


def run_ekf(t, accel, gyro, cfg: EkfConfig | None = None, q0=None):
    """Run the filter over a whole stream; returns (N, 4) quaternions.

    The filter is seeded from the first accelerometer sample unless ``q0`` is
    given. The first output is the seed attitude.
    """
    t = np.asarray(t, dtype=float)
    accel = np.asarray(accel, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    cfg = cfg or EkfConfig()
    if q0 is None:
        state = ekf_init(accel[0], cfg)
    else:
        q0 = geom.normalize(q0)
        state = EkfState(q=q0, cov=initial_cov(q0, cfg), cfg=cfg)
    dt = np.diff(t)
    if len(dt) and not (np.all(dt > 0) and np.all(dt <= 0.1)):
        raise ValueError("sample spacing must be in (0, 0.1] s")
    return _run(state.q, state.cov, t, accel, gyro, cfg.gravity_mag, cfg.q_noise, cfg.r_noise, cfg.gate)
