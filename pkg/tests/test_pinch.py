import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oovtrack.ekf import ImuSample
from oovtrack.pinch import (REDUCTION, THRESHOLD, PinchDetector, detect_pinches, half_life_steps, pinch_update,
                            score_trace)

RATE = 427.0


def direct_scores(mags, d=REDUCTION):
    """c_t written out as the explicit weighted sum of all past increments."""
    inc = np.abs(np.diff(mags))
    n = len(inc)
    lag = np.arange(n)[:, None] - np.arange(n)[None, :]
    weights = np.where(lag >= 0, d ** -np.maximum(lag, 0).astype(float), 0.0)
    return np.concatenate([[0.0], weights @ inc])


def crossings(c, threshold):
    prev = np.concatenate([[0.0], c[:-1]])
    return np.flatnonzero((prev < threshold) & (c >= threshold))


def accel_with_magnitude(mags):
    """Accelerometer rows whose norms are ``mags`` pointing in a fixed odd direction."""
    u = np.array([0.3, -0.4, 0.866])
    u /= np.linalg.norm(u)
    return np.outer(mags, u)


def run(mags, det=None):
    det = det or PinchDetector()
    scores, events = [], []
    for i, a in enumerate(accel_with_magnitude(mags)):
        det, ev = pinch_update(det, ImuSample(i / RATE, a, np.zeros(3)))
        scores.append(det.c)
        if ev is not None:
            events.append(ev)
    return np.array(scores), events


def impulse_fixture(n=500, at=300, height=15.0):
    t = np.arange(n) / RATE
    mags = 9.81 + 0.5 * np.sin(2 * np.pi * 2.0 * t)
    mags[at] += height
    return mags


def test_recurrence_matches_direct_sum():
    r = np.random.default_rng(0)
    for _ in range(20):
        mags = np.abs(r.normal(9.81, 3.0, 400))
        scores, _ = run(mags)
        ref = direct_scores(mags)
        np.testing.assert_allclose(scores, ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(score_trace(accel_with_magnitude(mags)), ref, rtol=1e-12, atol=1e-12)


def test_constant_magnitude_decays_without_events():
    det = PinchDetector(c=3.0)
    scores, events = run(np.full(400, 9.81), det)
    assert events == []
    # the seeding sample leaves c alone, every later one divides by D
    np.testing.assert_allclose(scores[1:], 3.0 * REDUCTION ** -np.arange(1.0, 400.0), rtol=1e-12)


def test_single_large_step_fires():
    det = PinchDetector()
    det, ev = pinch_update(det, ImuSample(0.0, np.array([0.0, 0.0, 9.81]), np.zeros(3)))
    assert ev is None
    det, ev = pinch_update(det, ImuSample(0.01, np.array([0.0, 0.0, 19.81]), np.zeros(3)))
    assert det.c == pytest.approx(10.0, abs=1e-12)
    assert ev is not None and ev.t == 0.01 and ev.score == det.c


def test_impulse_fixture_single_event_at_impulse():
    mags = impulse_fixture()
    ref = crossings(direct_scores(mags), THRESHOLD)
    assert list(ref) == [300]
    _, events = run(mags)
    assert len(events) == 1
    assert events[0].t == 300 / RATE


@pytest.mark.parametrize("freq,amp", [(0.5, 2.0), (2.0, 0.5), (5.0, 0.2)])
def test_smooth_fixtures_never_fire(freq, amp):
    t = np.arange(2000) / RATE
    _, events = run(9.81 + amp * np.sin(2 * np.pi * freq * t))
    assert events == []


def test_half_life():
    assert half_life_steps() == pytest.approx(10.24, abs=5e-3)
    # oracle: slope of log c under pure decay, measured on the recurrence itself
    det = PinchDetector(c=1.0, last_mag=9.81)
    logs = []
    for i in range(200):
        det, _ = pinch_update(det, ImuSample(i / RATE, np.array([0.0, 0.0, 9.81]), np.zeros(3)))
        logs.append(math.log(det.c))
    slope = np.polyfit(np.arange(200), logs, 1)[0]
    assert -math.log(2.0) / slope == pytest.approx(half_life_steps(), rel=1e-9)


def test_refractory_suppresses_double_fire():
    mags = np.full(200, 9.81)
    mags[50] += 20.0
    mags[60:62] += 30.0  # 10 samples later, still inside 0.2 s
    mags[150] += 20.0  # 100 samples later (0.234 s), allowed
    _, events = run(mags)
    assert [round(e.t * RATE) for e in events] == [50, 150]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 5.0))
def test_scale_law(seed, k):
    r = np.random.default_rng(seed)
    mags = np.abs(r.normal(9.81, 4.0, 300))
    base, ev_base = run(mags, PinchDetector())
    scaled, ev_scaled = run(k * mags, PinchDetector(threshold=k * THRESHOLD))
    np.testing.assert_allclose(scaled, k * base, rtol=1e-9)
    assert [e.t for e in ev_scaled] == [e.t for e in ev_base]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_events_respect_refractory(seed):
    r = np.random.default_rng(seed)
    mags = np.abs(r.normal(9.81, 6.0, 800))
    _, events = run(mags)
    gaps = np.diff([e.t for e in events])
    assert np.all(gaps >= 0.2 - 1e-12)


def test_detector_validates():
    with pytest.raises(ValueError):
        PinchDetector(d=1.0)
    with pytest.raises(ValueError):
        PinchDetector(threshold=0.0)


def test_detects_synthetic_pinches(short_session):
    rec = short_session
    events = detect_pinches(rec.imu_t, rec.accel)
    found = sum(np.any(np.abs(np.array([e.t for e in events]) - p) < 0.03) for p in rec.pinch_times)
    assert len(rec.pinch_times) > 0
    assert found == len(rec.pinch_times)
