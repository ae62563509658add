"""Headset field-of-view logic and the tracking hand-off state machine.

Visibility is decided whenever a headset frame (tracked wrist + head pose,
~70 Hz) is consumed and then held until the next frame. A frame is consumed
by the first IMU sample whose timestamp is >= the frame's timestamp. Once
the hand is out of view it must come back inside the FOV shrunk by
``hysteresis_deg`` before it counts as visible again. If no headset frame
arrives for ``stale_after`` seconds the hand is treated as untracked.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numba import njit

from . import geom
from .ekf import ImuSample
from .features import input_rows, prior_rows
from .geom import Pose

PRIOR_LEN = 5


class Degenerate(ValueError):
    pass


class PriorUnavailable(RuntimeError):
    """Hand left the FOV before enough tracked poses were seen.

    ``state`` is the blind out-of-view state the caller should continue with.
    """

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class FovConfig:
    # the headset's real tracking FOV is only known to exceed 120 deg; 140 is a placeholder
    horizontal_fov_deg: float = 140.0
    vertical_fov_deg: float = 180.0
    hysteresis_deg: float = 2.0
    stale_after: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.horizontal_fov_deg < 360.0:
            raise ValueError("horizontal_fov_deg must be in (0, 360)")
        if not 0.0 < self.vertical_fov_deg <= 360.0:
            raise ValueError("vertical_fov_deg must be in (0, 360]")


def azimuth_elevation(head_pos, head_quat, wrist_pos):
    """Direction of the wrist in the head frame, degrees. Batched."""
    rel = np.asarray(wrist_pos, dtype=float) - np.asarray(head_pos, dtype=float)
    if np.any(np.linalg.norm(rel, axis=-1) <= 1e-6):
        raise Degenerate("wrist coincides with head")
    r = geom.quat_to_matrix(head_quat)
    local = np.einsum("...ji,...j->...i", r, rel)
    az = np.degrees(np.arctan2(local[..., 1], local[..., 0]))
    el = np.degrees(np.arctan2(local[..., 2], np.hypot(local[..., 0], local[..., 1])))
    return az, el


def _inside(az, el, cfg: FovConfig, margin_deg: float = 0.0):
    return (np.abs(az) <= cfg.horizontal_fov_deg / 2 - margin_deg) & (
        np.abs(el) <= cfg.vertical_fov_deg / 2 - margin_deg)


def in_tracking_fov(head: Pose, wrist_pos, cfg: FovConfig, margin_deg: float = 0.0) -> bool:
    az, el = azimuth_elevation(head.position, head.orientation, wrist_pos)
    return bool(_inside(az, el, cfg, margin_deg))


# --- offline segmentation ---------------------------------------------------

@njit(cache=True)
def _visibility(imu_t, frame_t, frame_idx, strict_in, loose_in, stale_after):
    n = len(imu_t)
    vis = np.empty(n, dtype=np.bool_)
    tracked = np.zeros(n, dtype=np.int64)  # visible frames consumed so far
    visible = True
    have_frame = False
    last_t = 0.0
    count = 0
    j = 0
    for i in range(n):
        if j < len(frame_t) and frame_idx[j] == i:
            ok = strict_in[j] if visible else loose_in[j]
            have_frame = True
            last_t = frame_t[j]
            if ok:
                count += 1
            visible = ok
            j += 1
        elif have_frame and imu_t[i] - last_t > stale_after:
            visible = False
        vis[i] = visible
        tracked[i] = count
    return vis, tracked


def consumed_index(imu_t, frame_t):
    """IMU index at which each headset frame is consumed (first t_imu >= t_frame)."""
    return np.searchsorted(np.asarray(imu_t), np.asarray(frame_t), side="left")


def visibility_mask(imu_t, frame_t, head_pos, head_quat, wrist_pos, cfg: FovConfig):
    """Per-IMU-sample visibility and the running count of tracked frames."""
    frame_t = np.asarray(frame_t, dtype=float)
    idx = consumed_index(imu_t, frame_t)
    keep = idx < len(imu_t)
    if np.any(np.diff(idx[keep]) == 0):
        raise ValueError("more than one headset frame per IMU sample")
    az, el = azimuth_elevation(head_pos, head_quat, wrist_pos)
    strict = _inside(az, el, cfg)
    loose = _inside(az, el, cfg, cfg.hysteresis_deg)
    return _visibility(np.asarray(imu_t, dtype=float), frame_t[keep], idx[keep],
                       strict[keep], loose[keep], cfg.stale_after)


def segment_out_of_view(rec, cfg: FovConfig):
    """Out-of-view index ranges ``[(exit, reentry), ...]`` and the drop count.

    ``reentry`` is exclusive (the first visible sample, or ``len(imu)``).
    Segments with fewer than 5 tracked headset frames before the exit are
    dropped and counted.
    """
    vis, tracked = visibility_mask(rec.imu_t, rec.head_t, rec.head_pos, geom.normalize(rec.head_quat),
                                   rec.headset_wrist_pos, cfg)
    return segments_from_mask(vis, tracked)


def segments_from_mask(vis, tracked):
    out = np.flatnonzero(~vis)
    if out.size == 0:
        return [], 0
    breaks = np.flatnonzero(np.diff(out) > 1)
    starts = np.concatenate([[out[0]], out[breaks + 1]])
    stops = np.concatenate([out[breaks] + 1, [out[-1] + 1]])
    segments = []
    dropped = 0
    for a, b in zip(starts, stops):
        if tracked[a] >= PRIOR_LEN:
            segments.append((int(a), int(b)))
        else:
            dropped += 1
    return segments, dropped


# --- online state machine ---------------------------------------------------

class PoseSource(Enum):
    HEADSET = 0
    MODEL = 1
    NONE = 2


@dataclass(frozen=True)
class TrackedFrame:
    """One headset frame: tracked wrist and head pose at time t."""
    t: float
    wrist: Pose
    head: Pose


@dataclass(frozen=True)
class InView:
    history: tuple = ()
    last_frame_t: Optional[float] = None


@dataclass(frozen=True)
class OutOfView:
    exit_time: float
    prior: Optional[tuple]  # None when the exit happened without enough history
    buffer: list = field(default_factory=list)
    history: tuple = ()
    last_frame_t: Optional[float] = None


TrackerState = InView | OutOfView


def _frame_visible(frame: TrackedFrame, cfg: FovConfig, margin: float) -> bool:
    try:
        return in_tracking_fov(frame.head, frame.wrist.position, cfg, margin)
    except Degenerate:
        return False


def _row(head: Pose, imu: ImuSample, ekf_quat):
    return input_rows(imu.accel[None], imu.gyro[None], head.position[None],
                      head.orientation[None], np.asarray(ekf_quat)[None])[0]


def tracker_step(state, headset: Optional[TrackedFrame], head: Pose, imu: ImuSample, ekf_quat,
                 cfg: FovConfig):
    """Advance the hand-off state machine by one IMU sample.

    While the hand is out of view the 21-wide input row of every sample is
    buffered; the buffer list is owned by the state and grows in place.
    Returns ``(state, PoseSource)``.
    """
    t = float(imu.t)
    was_visible = isinstance(state, InView)
    history = state.history
    last_t = state.last_frame_t
    if headset is not None:
        visible = _frame_visible(headset, cfg, 0.0 if was_visible else cfg.hysteresis_deg)
        last_t = headset.t
        if visible:
            history = (history + (headset,))[-PRIOR_LEN:]
    elif last_t is not None and t - last_t > cfg.stale_after:
        visible = False
    else:
        visible = was_visible

    if visible:
        return InView(history=history, last_frame_t=last_t), PoseSource.HEADSET
    if was_visible:
        if len(history) < PRIOR_LEN:
            blind = OutOfView(exit_time=t, prior=None, history=history, last_frame_t=last_t)
            raise PriorUnavailable(
                f"hand left view at t={t:.3f}s with {len(history)} tracked poses", blind)
        return OutOfView(exit_time=t, prior=history, buffer=[_row(head, imu, ekf_quat)], history=history,
                         last_frame_t=last_t), PoseSource.MODEL
    if state.prior is None:
        return OutOfView(exit_time=state.exit_time, prior=None, history=history,
                         last_frame_t=last_t), PoseSource.NONE
    state.buffer.append(_row(head, imu, ekf_quat))
    return OutOfView(exit_time=state.exit_time, prior=state.prior, buffer=state.buffer,
                     history=history, last_frame_t=last_t), PoseSource.MODEL


def prior_matrix(prior) -> np.ndarray:
    """5x18 rows of [wrist_pos | wrist_6d | head_pos | head_6d]."""
    return prior_rows(
        np.stack([f.wrist.position for f in prior]), np.stack([f.wrist.orientation for f in prior]),
        np.stack([f.head.position for f in prior]), np.stack([f.head.orientation for f in prior]))
