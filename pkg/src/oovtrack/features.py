"""Assembly of network input rows.

Every path that feeds the network (dataset building, the streaming service)
goes through these functions so the arithmetic is identical.
"""
from __future__ import annotations

import numpy as np

from . import geom

INPUT_WIDTH = 21
PRIOR_WIDTH = 18


def input_rows(accel, gyro, head_pos, head_quat, ekf_quat):
    """(N, 21) rows: accel | gyro | head_pos | head_6d | ekf_6d."""
    return np.concatenate([
        np.asarray(accel, dtype=float),
        np.asarray(gyro, dtype=float),
        np.asarray(head_pos, dtype=float),
        geom.quat_to_6d(head_quat),
        geom.quat_to_6d(ekf_quat),
    ], axis=-1)


def prior_rows(wrist_pos, wrist_quat, head_pos, head_quat):
    """(N, 18) rows: wrist_pos | wrist_6d | head_pos | head_6d."""
    return np.concatenate([
        np.asarray(wrist_pos, dtype=float),
        geom.quat_to_6d(wrist_quat),
        np.asarray(head_pos, dtype=float),
        geom.quat_to_6d(head_quat),
    ], axis=-1)
