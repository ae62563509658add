"""Synthetic sessions: a kinematic arm model driving a virtual wrist IMU.

The subject stands still; the right arm moves between random postures along
minimum-jerk joint trajectories with short dwells in between. A pinch is
simulated during some dwells as a short damped accelerometer transient.
The head wanders slowly by a few degrees. IMU samples are produced at
427 Hz, headset frames (head pose + tracked wrist pose) at 70 Hz.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .ekf import GRAVITY

IMU_RATE = 427.0
HEADSET_RATE = 70.0
SCHEMA_VERSION = 1
MAGIC = b"OOVREC\x00\x01"
TASKS = ("DROP", "GRAB", "COMPOUND")


class TooShort(ValueError):
    pass


class EmptySplit(ValueError):
    pass


def _rad(lo, hi):
    return (float(np.radians(lo)), float(np.radians(hi)))


@dataclass(frozen=True)
class ArmModel:
    """Right arm: 3-DoF shoulder, elbow flexion, forearm pronation.

    ``shoulder_pos`` is relative to the resting head position (world axes).
    Limits are radians. Upper arm direction is given by azimuth (0 = ahead,
    negative = to the right/back) and elevation (-90 deg = hanging).
    """
    shoulder_pos: tuple = (0.0, -0.19, -0.25)
    upper_len: float = 0.30
    fore_len: float = 0.26
    shoulder_az: tuple = _rad(-150.0, 45.0)
    shoulder_el: tuple = _rad(-80.0, 75.0)
    humeral: tuple = _rad(-60.0, 60.0)
    elbow: tuple = _rad(0.0, 135.0)
    pronation: tuple = _rad(-80.0, 80.0)

    def __post_init__(self):
        if self.upper_len <= 0 or self.fore_len <= 0:
            raise ValueError("segment lengths must be positive")

    @property
    def limits(self):
        return np.array([self.shoulder_az, self.shoulder_el, self.humeral, self.elbow, self.pronation])

    @property
    def reach(self):
        return self.upper_len + self.fore_len

    def rest_posture(self):
        # arm hanging, slightly forward, elbow a little bent
        return np.array([0.0, np.radians(-80.0), 0.0, np.radians(15.0), 0.0])


@dataclass(frozen=True)
class SynthConfig:
    imu_rate: float = IMU_RATE
    headset_rate: float = HEADSET_RATE
    motion_scale: float = 1.0  # 0 freezes every joint at the rest posture
    dwell: tuple = (0.15, 0.9)
    pinch_prob: float = 0.5
    pinch_amp: tuple = (12.0, 25.0)  # m/s^2
    gyro_noise: float = 0.003  # rad/s per sample
    accel_noise: float = 0.02  # m/s^2 per sample
    gyro_bias: float = 0.003  # rad/s, per-session constant, sigma
    head_wander_deg: tuple = (15.0, 6.0, 2.0)  # yaw, pitch, roll amplitude
    head_pos_noise: float = 0.001
    head_rot_noise_deg: float = 0.2
    head_height: float = 1.65
    arm_jitter: float = 0.08  # relative spread of segment lengths across sessions


# --- kinematics ---------------------------------------------------------------

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])
# forearm frame (x along forearm, distal) -> wrist frame (y toward the elbow, z through the palm)
_ALIGN = geom.matrix_to_quat(np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]]))


def _axis_quats(axis, angles):
    angles = np.asarray(angles, dtype=float)[..., None]
    return np.concatenate([np.cos(0.5 * angles), np.sin(0.5 * angles) * axis], axis=-1)


def forward_kinematics(arm: ArmModel, joints, shoulder_world):
    """Wrist positions (N, 3), wrist quaternions (N, 4), elbow positions (N, 3)."""
    j = np.atleast_2d(joints)
    q_upper = geom.quat_mul(geom.quat_mul(_axis_quats(_Z, j[:, 0]), _axis_quats(_Y, -j[:, 1])),
                            _axis_quats(_X, j[:, 2]))
    q_fore = geom.quat_mul(q_upper, _axis_quats(_Z, j[:, 3]))
    r_upper = geom.quat_to_matrix(q_upper)
    r_fore = geom.quat_to_matrix(q_fore)
    elbow = np.asarray(shoulder_world) + arm.upper_len * r_upper[:, :, 0]
    wrist = elbow + arm.fore_len * r_fore[:, :, 0]
    q_wrist = geom.quat_mul(geom.quat_mul(q_fore, _axis_quats(_X, j[:, 4])), _ALIGN)
    return wrist, q_wrist, elbow


def _min_jerk(s):
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s))


@dataclass
class KeyframeTrack:
    """Piecewise minimum-jerk interpolation between held keyframes."""
    times: np.ndarray  # (K,) keyframe start times
    holds: np.ndarray  # (K,) hold durations
    values: np.ndarray  # (K, D)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        hold_end = self.times[k] + self.holds[k]
        nxt = np.minimum(k + 1, len(self.times) - 1)
        span = self.times[nxt] - hold_end
        s = np.where(span > 0, (t - hold_end) / np.where(span > 0, span, 1.0), 0.0)
        s = _min_jerk(np.clip(s, 0.0, 1.0))[:, None]
        return self.values[k] + s * (self.values[nxt] - self.values[k])


def _joint_track(rng, arm: ArmModel, duration, cfg: SynthConfig):
    lim = arm.limits
    rest = arm.rest_posture()
    times, holds, values = [0.0], [], [rest]
    t = 0.0
    hold = rng.uniform(0.6, 1.0)  # quasi-static start lets the EKF seed cleanly
    holds.append(hold)
    t += hold
    shoulder = np.zeros(3)
    prev = rest
    while t < duration:
        target = rest + cfg.motion_scale * (rng.uniform(lim[:, 0], lim[:, 1]) - rest)
        target = np.clip(target, lim[:, 0], lim[:, 1])
        a = forward_kinematics(arm, prev, shoulder)[0][0]
        b = forward_kinematics(arm, target, shoulder)[0][0]
        move = float(np.clip(0.55 + 1.3 * np.linalg.norm(b - a), 0.7, 2.2))
        t += move
        times.append(t)
        values.append(target)
        hold = rng.uniform(*cfg.dwell)
        holds.append(hold)
        t += hold
        prev = target
    return KeyframeTrack(np.array(times), np.array(holds), np.array(values))


def _head_track(rng, duration, cfg: SynthConfig):
    amp = np.radians(np.array(cfg.head_wander_deg)) * min(cfg.motion_scale, 1.0)
    times, holds, values = [0.0], [rng.uniform(0.5, 2.0)], [np.zeros(3)]
    t = holds[0]
    while t < duration:
        t += rng.uniform(0.8, 2.0)
        times.append(t)
        values.append(rng.uniform(-amp, amp))
        hold = rng.uniform(0.5, 3.0)
        holds.append(hold)
        t += hold
    return KeyframeTrack(np.array(times), np.array(holds), np.array(values))


def _ypr_quats(ypr):
    return geom.quat_mul(geom.quat_mul(_axis_quats(_Z, ypr[:, 0]), _axis_quats(_Y, ypr[:, 1])),
                         _axis_quats(_X, ypr[:, 2]))


# --- IMU synthesis --------------------------------------------------------------

def imu_from_trajectory(t, wrist_pos, wrist_quat, rng=None, gyro_noise=0.0, accel_noise=0.0,
                        gyro_bias=None, gravity=GRAVITY):
    """Body-frame gyro and specific force from a sampled wrist trajectory.

    Angular velocity comes from the central difference of the quaternion
    log, linear acceleration from the central second difference of
    position. End samples copy their neighbour. Returns (accel, gyro).
    """
    t = np.asarray(t, dtype=float)
    p = np.asarray(wrist_pos, dtype=float)
    q = np.asarray(wrist_quat, dtype=float)
    n = len(t)
    if n < 3:
        raise TooShort(f"need at least 3 poses, got {n}")
    gyro = np.empty((n, 3))
    rel = geom.quat_mul(geom.quat_conj(q[:-2]), q[2:])
    gyro[1:-1] = geom.quat_log(rel) / (t[2:] - t[:-2])[:, None]
    gyro[0], gyro[-1] = gyro[1], gyro[-2]

    acc = np.empty((n, 3))
    h0 = (t[1:-1] - t[:-2])[:, None]
    h1 = (t[2:] - t[1:-1])[:, None]
    acc[1:-1] = 2.0 * ((p[2:] - p[1:-1]) / h1 - (p[1:-1] - p[:-2]) / h0) / (h0 + h1)
    acc[0], acc[-1] = acc[1], acc[-2]
    acc[:, 2] += gravity
    r = geom.quat_to_matrix(q)
    accel = np.einsum("nji,nj->ni", r, acc)

    if rng is not None:
        if gyro_bias is not None:
            gyro = gyro + gyro_bias
        gyro = gyro + rng.normal(0.0, gyro_noise, gyro.shape) if gyro_noise else gyro
        accel = accel + rng.normal(0.0, accel_noise, accel.shape) if accel_noise else accel
    return accel, gyro


def _pinch_transient(n, rate, onset, amp, freq=55.0, tau=0.012):
    """Damped oscillation along the wrist z axis starting at sample ``onset``."""
    out = np.zeros((n, 3))
    k = np.arange(onset, min(n, onset + int(0.08 * rate)))
    dt = (k - onset + 1) / rate
    out[k, 2] = amp * np.exp(-dt / tau) * np.sin(2.0 * np.pi * freq * dt)
    return out


# --- recordings -----------------------------------------------------------------

@dataclass
class Recording:
    imu_t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    wrist_pos: np.ndarray  # ground truth at IMU rate
    wrist_quat: np.ndarray
    head_t: np.ndarray  # headset frames (~70 Hz)
    head_pos: np.ndarray
    head_quat: np.ndarray
    headset_wrist_pos: np.ndarray  # wrist pose as the headset would report it, per head frame
    headset_wrist_quat: np.ndarray
    pinch_times: np.ndarray
    meta: dict = field(default_factory=dict)

    COLUMNS = (
        ("imu_t", "<f8"), ("accel", "<f4"), ("gyro", "<f4"), ("wrist_pos", "<f4"),
        ("wrist_quat", "<f4"), ("head_t", "<f8"), ("head_pos", "<f4"), ("head_quat", "<f4"),
        ("headset_wrist_pos", "<f4"), ("headset_wrist_quat", "<f4"), ("pinch_times", "<f8"),
    )

    def __post_init__(self):
        # hold values at storage precision so saved and in-memory recordings agree
        for name, dt in self.COLUMNS:
            arr = np.asarray(getattr(self, name))
            setattr(self, name, arr.astype(dt).astype(np.float64))
        if len(self.imu_t) != len(self.wrist_pos):
            raise ValueError("imu and wrist ground truth must have equal length")

    @property
    def duration(self):
        return float(self.imu_t[-1] - self.imu_t[0])

    def save(self, path):
        path = Path(path)
        cols = []
        blobs = []
        for name, dt in self.COLUMNS:
            arr = np.ascontiguousarray(getattr(self, name).astype(dt))
            cols.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
        header = {"schema_version": SCHEMA_VERSION, "imu_rate": self.meta.get("imu_rate", IMU_RATE),
                  "headset_rate": self.meta.get("headset_rate", HEADSET_RATE),
                  "columns": cols, "meta": self.meta}
        hbytes = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(hbytes)))
            f.write(hbytes)
            for b in blobs:
                f.write(b)
        return path

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a recording file")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen])
        if header["schema_version"] != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema {header['schema_version']}")
        off = 12 + hlen
        arrays = {}
        for col in header["columns"]:
            dt = np.dtype(col["dtype"])
            count = int(np.prod(col["shape"])) if col["shape"] else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(col["shape"])
            off += count * dt.itemsize
            arrays[col["name"]] = arr
        if off != len(data):
            raise ValueError(f"{path}: trailing or missing bytes")
        return cls(meta=header["meta"], **arrays)


def generate_session(seed: int, arm: ArmModel | None = None, duration: float = 60.0,
                     cfg: SynthConfig | None = None, jitter_arm: bool = True) -> Recording:
    if not 1.0 <= duration <= 300.0:
        raise ValueError("duration must be within [1, 300] s")
    cfg = cfg or SynthConfig()
    arm = arm or ArmModel()
    rng = np.random.default_rng(seed)
    if jitter_arm and cfg.arm_jitter > 0:
        scale = 1.0 + cfg.arm_jitter * rng.uniform(-1.0, 1.0, 2)
        arm = ArmModel(**{**asdict(arm), "upper_len": arm.upper_len * scale[0],
                          "fore_len": arm.fore_len * scale[1]})

    n = int(round(duration * cfg.imu_rate)) + 1
    imu_t = np.arange(n) / cfg.imu_rate
    m = int(np.ceil(imu_t[-1] * cfg.headset_rate)) + 1
    head_t = np.arange(m) / cfg.headset_rate

    head_base = np.array([0.0, 0.0, cfg.head_height])
    shoulder = head_base + np.asarray(arm.shoulder_pos)
    joints = _joint_track(rng, arm, duration + 1.0, cfg)
    head = _head_track(rng, duration + 1.0, cfg)

    wrist_pos, wrist_quat, _ = forward_kinematics(arm, joints(imu_t), shoulder)
    hs_pos, hs_quat, _ = forward_kinematics(arm, joints(head_t), shoulder)

    ypr = head(head_t)
    head_quat = _ypr_quats(ypr)
    # head translates slightly as it turns (neck pivot ~10 cm below the eyes)
    neck = np.array([0.0, 0.0, -0.10])
    head_pos = head_base + neck - np.einsum("nij,j->ni", geom.quat_to_matrix(head_quat), neck)
    head_pos = head_pos + rng.normal(0.0, cfg.head_pos_noise, head_pos.shape)
    noise = geom.quat_exp(rng.normal(0.0, np.radians(cfg.head_rot_noise_deg), (m, 3)))
    head_quat = geom.quat_mul(head_quat, noise)

    bias = rng.normal(0.0, cfg.gyro_bias, 3)
    accel, gyro = imu_from_trajectory(imu_t, wrist_pos, wrist_quat, rng, cfg.gyro_noise,
                                      cfg.accel_noise, bias)

    pinch_times = []
    for k in range(1, len(joints.times)):
        start, hold = joints.times[k], joints.holds[k]
        if start > duration - 0.5 or rng.uniform() >= cfg.pinch_prob:
            continue
        onset = int(np.ceil((start + 0.3 * hold) * cfg.imu_rate))
        if onset >= n:
            continue
        accel = accel + _pinch_transient(n, cfg.imu_rate, onset, rng.uniform(*cfg.pinch_amp))
        pinch_times.append(imu_t[onset])

    meta = {
        "seed": int(seed), "duration": float(duration), "imu_rate": cfg.imu_rate,
        "headset_rate": cfg.headset_rate, "arm": asdict(arm), "synth": asdict(cfg),
        "task": TASKS[seed % len(TASKS)], "shoulder_world": shoulder.tolist(),
    }
    return Recording(imu_t=imu_t, accel=accel, gyro=gyro, wrist_pos=wrist_pos, wrist_quat=wrist_quat,
                     head_t=head_t, head_pos=head_pos, head_quat=head_quat,
                     headset_wrist_pos=hs_pos, headset_wrist_quat=hs_quat,
                     pinch_times=np.array(pinch_times, dtype=float), meta=meta)
