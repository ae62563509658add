"""Pinch detection from accelerometer-magnitude transients.

A running score accumulates the absolute change of ``|a|`` and decays by a
constant factor each sample::

    c_t = c_{t-1} / D + | |a_t| - |a_{t-1}| |

An event fires when the score crosses the threshold from below, unless the
previous event is younger than the refractory window. D and the threshold
are tuned for the nominal 427 Hz IMU rate; they do not transfer to other
rates unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .ekf import ImuSample

REDUCTION = 1.07
THRESHOLD = 4.9  # m/s^2
REFRACTORY = 0.2  # s


@dataclass(frozen=True)
class PinchEvent:
    t: float
    score: float


@dataclass(frozen=True)
class PinchDetector:
    c: float = 0.0
    d: float = REDUCTION
    threshold: float = THRESHOLD
    refractory: float = REFRACTORY
    last_mag: Optional[float] = None
    last_event_t: float = -math.inf

    def __post_init__(self):
        if self.d <= 1.0:
            raise ValueError("reduction factor must be > 1")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")


def pinch_update(det: PinchDetector, sample: ImuSample) -> tuple[PinchDetector, Optional[PinchEvent]]:
    t = float(sample.t)
    a = np.asarray(sample.accel, dtype=float)
    mag = math.sqrt(float(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]))
    if det.last_mag is None:
        # first sample only seeds the magnitude
        return replace(det, last_mag=mag), None
    c = det.c / det.d + abs(mag - det.last_mag)
    event = None
    last_event_t = det.last_event_t
    if det.c < det.threshold <= c and t - det.last_event_t >= det.refractory:
        event = PinchEvent(t=t, score=c)
        last_event_t = t
    return replace(det, c=c, last_mag=mag, last_event_t=last_event_t), event


def detect_pinches(t, accel, det: PinchDetector | None = None) -> list[PinchEvent]:
    det = det or PinchDetector()
    events = []
    for ti, ai in zip(np.asarray(t, dtype=float), np.asarray(accel, dtype=float)):
        det, ev = pinch_update(det, ImuSample(float(ti), ai, None))
        if ev is not None:
            events.append(ev)
    return events


def score_trace(accel, d: float = REDUCTION):
    """Score after every sample (0 for the seeding sample)."""
    mags = np.linalg.norm(np.asarray(accel, dtype=float), axis=1)
    out = np.zeros(len(mags))
    c = 0.0
    for i in range(1, len(mags)):
        c = c / d + abs(mags[i] - mags[i - 1])
        out[i] = c
    return out


def half_life_steps(d: float = REDUCTION) -> float:
    return math.log(2.0) / math.log(d)
