"""Tracking metrics, report tables, target-selection simulation and the
inertial dead-reckoning baseline."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .dataset import Dataset, Sequence
from .ekf import GRAVITY
from .model import PoseEstimator, refine_pinch_position
from .train import make_batches

TABLE_COLUMNS = ("fov", "mean_pos_cm", "median_pos_cm", "std_pos_cm", "mean_drop_cm", "mean_grab_cm",
                 "mean_compound_cm", "mean_rot_deg", "median_rot_deg", "std_rot_deg")
TABLE_HEADERS = ("FOV", "mean pos.", "median pos.", "std. pos.", "mean DROP", "mean GRAB", "mean COMP.",
                 "mean rot.", "median rot.", "std. rot.")
CURVE_COLUMNS = ("t_start_s", "t_end_s", "n", "mean_cm", "median_cm", "p5_cm", "p95_cm")
TASK_COLUMNS = {"DROP": "mean_drop_cm", "GRAB": "mean_grab_cm", "COMPOUND": "mean_compound_cm"}


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


def _pred_arrays(pred):
    if isinstance(pred, tuple):
        return np.asarray(pred[0], dtype=float), np.asarray(pred[1], dtype=float)
    return (np.array([p.position for p in pred], dtype=float).reshape(-1, 3),
            np.array([p.rot6d for p in pred], dtype=float).reshape(-1, 6))


def _gt_arrays(gt):
    if isinstance(gt, tuple):
        pos, rot = np.asarray(gt[0], dtype=float), np.asarray(gt[1], dtype=float)
        return pos, (geom.sixd_to_rot(rot) if rot.shape[-1] == 6 else geom.quat_to_matrix(rot))
    return (np.array([g.position for g in gt], dtype=float).reshape(-1, 3),
            np.array([g.matrix for g in gt], dtype=float).reshape(-1, 3, 3))


def pose_errors(pred, gt):
    """Per-step position error (m) and rotation error (deg).

    ``pred`` is a list of PoseEstimate or a ``(positions, rot6d)`` tuple;
    ``gt`` is a list of Pose or a ``(positions, quats or rot6d)`` tuple.
    """
    pp, pr = _pred_arrays(pred)
    gp, gr = _gt_arrays(gt)
    if len(pp) != len(gp):
        raise LengthMismatch(f"{len(pp)} estimates vs {len(gp)} ground-truth poses")
    if not isinstance(pred, tuple) and not isinstance(gt, tuple):
        for a, b in zip(pred, gt):
            if hasattr(b, "t") and not np.isclose(a.t, b.t):
                raise LengthMismatch("timestamps differ")
    pos_err = np.linalg.norm(pp - gp, axis=-1)
    qa = geom.matrix_to_quat(geom.sixd_to_rot(pr))
    qb = geom.matrix_to_quat(gr)
    return pos_err, geom.quat_angle_diff(qa, qb)


@dataclass
class SegmentErrors:
    pos_err: np.ndarray  # m
    rot_err: np.ndarray  # deg
    t_since_exit: np.ndarray  # s
    task: str = ""
    fov: float = float("nan")


def summarize(segments, bucket_s: float = 0.5):
    """Aggregate errors over all out-of-view samples.

    Statistics use every sample of every segment (std is the population
    std). The time curve buckets samples by seconds since the hand left the
    FOV and reports mean, median and 5th/95th percentiles in cm.
    """
    segments = [s for s in segments if len(s.pos_err)]
    if not segments:
        raise EmptyInput("no error samples to summarize")
    pos = np.concatenate([s.pos_err for s in segments]) * 100.0
    rot = np.concatenate([s.rot_err for s in segments])
    t = np.concatenate([s.t_since_exit for s in segments])
    out = {
        "n": int(pos.size),
        "mean_pos_cm": float(np.mean(pos)), "median_pos_cm": float(np.median(pos)),
        "std_pos_cm": float(np.std(pos)),
        "mean_rot_deg": float(np.mean(rot)), "median_rot_deg": float(np.median(rot)),
        "std_rot_deg": float(np.std(rot)),
    }
    for task, col in TASK_COLUMNS.items():
        sel = [s.pos_err for s in segments if s.task == task]
        out[col] = float(np.mean(np.concatenate(sel)) * 100.0) if sel else float("nan")
    curve = []
    bucket = np.floor(t / bucket_s).astype(int)
    for b in np.unique(bucket):
        e = pos[bucket == b]
        curve.append({"t_start_s": b * bucket_s, "t_end_s": (b + 1) * bucket_s, "n": int(e.size),
                      "mean_cm": float(e.mean()), "median_cm": float(np.median(e)),
                      "p5_cm": float(np.percentile(e, 5)), "p95_cm": float(np.percentile(e, 95))})
    out["curve"] = curve
    return out


# --- target selection ---------------------------------------------------------

def target_grid(arm_len: float, shoulder_height: float, shoulder_xy=(0.0, 0.0)) -> np.ndarray:
    """17 targets to the right of a user facing +x (right is -y).

    The outer layer lies on the sphere of radius ``arm_len`` around the
    shoulder at azimuths -60/-90/-120 deg (front/side/back) and elevations
    +30/0/-30 deg. The inner layer is the outer one moved ``arm_len / 2``
    toward the body, without its back-middle point. Rows: outer first,
    each layer ordered by elevation then azimuth.
    """
    shoulder = np.array([shoulder_xy[0], shoulder_xy[1], shoulder_height], dtype=float)
    pts = []
    for layer in (0, 1):
        for el in (30.0, 0.0, -30.0):
            for az in (-60.0, -90.0, -120.0):
                if layer == 1 and el == 0.0 and az == -120.0:
                    continue
                a, e = np.radians(az), np.radians(el)
                p = shoulder + arm_len * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
                if layer == 1:
                    p[1] += arm_len / 2
                pts.append(p)
    return np.array(pts)


def nearest_target(points, grid) -> np.ndarray:
    d = np.linalg.norm(np.asarray(points, dtype=float)[..., None, :] - grid, axis=-1)
    return np.argmin(d, axis=-1)


def selection_success(estimates, true_ids, grid) -> float:
    """Fraction of estimates whose nearest grid point is the true target."""
    true_ids = np.asarray(true_ids)
    if true_ids.size == 0:
        raise EmptyInput("no selection events")
    return float(np.mean(nearest_target(estimates, grid) == true_ids))


# --- estimators ---------------------------------------------------------------

def dead_reckoning(dataset: Dataset, seq: Sequence, gravity: float = GRAVITY):
    """Inertial-only estimate at the sequence's output steps.

    The EKF attitude is re-aligned to the last tracked wrist orientation,
    the initial velocity comes from the last two tracked positions, and
    gravity-compensated acceleration is integrated twice from the moment
    the last tracked frame arrived.
    """
    f = dataset.features[seq.rec]
    prior_pos = seq.prior[:, 0:3]
    r_last = geom.sixd_to_rot(seq.prior[-1, 3:9])
    j = int(seq.prior_index[-1])
    rot_ekf = geom.quat_to_matrix(f.ekf_quat[j:seq.stop])
    align = r_last @ rot_ekf[0].T
    rot = align @ rot_ekf
    accel = np.einsum("nij,nj->ni", rot, f.x[j:seq.stop, 0:3].astype(float))
    accel[:, 2] -= gravity
    dt = np.diff(f.imu_t[j:seq.stop])
    v0 = (prior_pos[-1] - prior_pos[-2]) / (seq.prior_t[-1] - seq.prior_t[-2])
    vel = v0 + np.concatenate([np.zeros((1, 3)), np.cumsum(accel[1:] * dt[:, None], axis=0)])
    pos = prior_pos[-1] + np.concatenate([np.zeros((1, 3)), np.cumsum(vel[1:] * dt[:, None], axis=0)])
    idx = seq.target_index(dataset.cfg.downsample) - j
    return pos[idx], geom.rot_to_6d(rot[idx])


def model_estimates(model: PoseEstimator, dataset: Dataset, seqs, max_batch_samples=16_384):
    """Model outputs per sequence, batching sequences of equal length."""
    out = [None] * len(seqs)
    lengths = [q.length for q in seqs]
    if not seqs:
        return out
    for idx in make_batches(lengths, max(1, max_batch_samples // max(lengths)), 0):
        x = np.stack([dataset.x(seqs[i]) for i in idx])
        s = np.stack([seqs[i].prior for i in idx])
        pos, rot = model.forward(x, s)
        for k, i in enumerate(idx):
            out[i] = (pos.data[k], rot.data[k])
    return out


def cropped(seq: Sequence, horizon_samples: int, downsample: int = 8) -> Sequence:
    n = min(seq.length, horizon_samples // downsample * downsample)
    return Sequence(rec=seq.rec, fov=seq.fov, start=seq.start, stop=seq.start + n, prior=seq.prior,
                    full_stop=seq.full_stop, prior_t=seq.prior_t, prior_index=seq.prior_index)


def evaluate(model: PoseEstimator | None, dataset: Dataset, split="test", fovs=None,
             horizon_s: float | None = None):
    """Per-method, per-FOV SegmentErrors lists (methods: model, dead_reckoning)."""
    ds = dataset.cfg.downsample
    seqs = [q for q in dataset.sequences[split] if fovs is None or q.fov in fovs]
    if horizon_s is not None:
        rate = 1.0 / np.median(np.diff(dataset.features[0].imu_t))
        seqs = [cropped(q, int(round(horizon_s * rate)), ds) for q in seqs]
        seqs = [q for q in seqs if q.length >= ds]
    results = {"model": defaultdict(list), "dead_reckoning": defaultdict(list)}
    estimates = {"dead_reckoning": [dead_reckoning(dataset, q) for q in seqs]}
    if model is not None:
        estimates["model"] = model_estimates(model, dataset, seqs)
    else:
        del results["model"]
    for method, est in estimates.items():
        for q, e in zip(seqs, est):
            f = dataset.features[q.rec]
            idx = q.target_index(ds)
            pe, re = pose_errors(e, (f.wrist_pos[idx], f.wrist_quat[idx]))
            results[method][q.fov].append(SegmentErrors(
                pos_err=pe, rot_err=re, t_since_exit=f.imu_t[idx] - f.imu_t[q.start],
                task=f.meta.get("task", ""), fov=q.fov))
    return results, seqs, estimates


def selection_rates(dataset: Dataset, seqs, estimates, pinch_times):
    """Selection success per FOV for pinches that happen while out of view.

    For every pinch inside a sequence the latest output step at or before
    the pinch is used. The true target is the grid point nearest to the true
    pinch point, so success means the estimate selects that same point.
    Returns ``({fov: rate}, {fov: event count})``; ``pinch_times`` is
    indexed by recording id.
    """
    ds = dataset.cfg.downsample
    hits = defaultdict(list)
    for q, (pos, rot) in zip(seqs, estimates):
        f = dataset.features[q.rec]
        arm = f.meta.get("arm", {})
        arm_len = arm.get("upper_len", 0.30) + arm.get("fore_len", 0.26)
        shoulder = np.asarray(f.meta.get("shoulder_world", (0.0, -0.19, 1.40)), dtype=float)
        grid = target_grid(arm_len, shoulder[2], shoulder[:2])
        for tp in pinch_times[q.rec]:
            i = int(np.searchsorted(f.imu_t, tp))
            k = (i - q.start + 1) // ds - 1
            if i >= q.stop or k < 0:
                continue
            gi = q.start + ds * (k + 1) - 1
            true_pt = refine_pinch_position(f.wrist_pos[gi], f.wrist_quat[gi])
            est_pt = refine_pinch_position(pos[k], rot[k])
            hits[q.fov].append(selection_success(est_pt[None], [nearest_target(true_pt, grid)], grid))
    return ({fov: float(np.mean(h)) for fov, h in hits.items()},
            {fov: len(h) for fov, h in hits.items()})


# --- report output --------------------------------------------------------------

def table_rows(results):
    """Rows of the per-FOV table for every method."""
    rows = []
    for method, per_fov in results.items():
        for fov in sorted(per_fov, reverse=True):
            s = summarize(per_fov[fov])
            rows.append({"method": method, "fov": fov, **{c: s[c] for c in TABLE_COLUMNS[1:]}, "n": s["n"]})
    return rows


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def markdown_table(rows) -> str:
    head = "| method | " + " | ".join(TABLE_HEADERS) + " |"
    sep = "|---" * (len(TABLE_HEADERS) + 1) + "|"
    lines = [head, sep]
    for r in rows:
        cells = [r["method"], f"{r['fov']:g}"] + [f"{r[c]:.2f}" for c in TABLE_COLUMNS[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_report(report_dir, results, selection=None, horizon_s=None, figures=True):
    """Writes table.csv, table.md, curve_<method>_fov<F>.csv, selection.csv and PNG figures."""
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_rows(results)
    write_csv(out / "table.csv", rows, ("method",) + TABLE_COLUMNS + ("n",))
    md = ["# Out-of-view tracking report", ""]
    if horizon_s is not None:
        md += [f"Errors over the first {horizon_s:g} s after the hand leaves the field of view.", ""]
    md += ["Positions in cm, rotations in degrees.", "", markdown_table(rows)]
    curves = {}
    for method, per_fov in results.items():
        for fov, segs in per_fov.items():
            curve = summarize(segs)["curve"]
            curves[(method, fov)] = curve
            write_csv(out / f"curve_{method}_fov{fov:g}.csv", curve, CURVE_COLUMNS)
    if selection:
        sel_rows = [{"method": m, "fov": fov, "success_rate": rate, "events": counts[fov]}
                    for m, (rates, counts) in selection.items() for fov, rate in sorted(rates.items())]
        write_csv(out / "selection.csv", sel_rows, ("method", "fov", "success_rate", "events"))
        md += ["", "## Target selection", "", "| method | FOV | success | events |", "|---|---|---|---|"]
        md += [f"| {r['method']} | {r['fov']:g} | {100 * r['success_rate']:.1f}% | {r['events']} |"
               for r in sel_rows]
    (out / "table.md").write_text("\n".join(md) + "\n")
    if figures:
        from . import plots
        plots.error_curves(curves, out / "error_vs_time.png")
        plots.fov_trend(rows, out / "mae_vs_fov.png")
    return rows
