"""Training/evaluation sequences cut from recordings by simulated FOVs.

Each recording is turned into a per-IMU-sample feature matrix once (the EKF
runs continuously from the start of the stream, so features do not depend
on the FOV). A sequence is then a slice of that matrix starting at the
moment the hand leaves the FOV, plus the 5x18 prior of the last headset
frames that still saw the hand.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .ekf import run_ekf
from .features import input_rows, prior_rows
from .fov import PRIOR_LEN, FovConfig, consumed_index, segments_from_mask, visibility_mask
from .synth import EmptySplit, Recording

DEFAULT_FOV_GRID = tuple(float(f) for f in range(40, 121, 5))
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    fov_grid: tuple = DEFAULT_FOV_GRID
    split: tuple = (0.7, 0.15, 0.15)
    downsample: int = 8
    max_seq_s: float = 15.0
    # training sequences are cut to a multiple of this so equal lengths can be batched
    length_quantum: int = 8
    vertical_fov_deg: float = 180.0
    hysteresis_deg: float = 2.0

    def __post_init__(self):
        if any(not 0.0 < f < 360.0 for f in self.fov_grid):
            raise ValueError("fov_grid values must be within (0, 360)")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f < 0 for f in self.split):
            raise ValueError("split fractions must be non-negative and sum to 1")
        if self.length_quantum % self.downsample:
            raise ValueError("length_quantum must be a multiple of downsample")

    def fov(self, deg) -> FovConfig:
        return FovConfig(horizontal_fov_deg=float(deg), vertical_fov_deg=self.vertical_fov_deg,
                         hysteresis_deg=self.hysteresis_deg)


@dataclass
class RecordingFeatures:
    """Per-sample network inputs and ground truth for one recording."""
    imu_t: np.ndarray
    x: np.ndarray  # (N, 21)
    wrist_pos: np.ndarray  # (N, 3)
    wrist_6d: np.ndarray  # (N, 6)
    wrist_quat: np.ndarray
    ekf_quat: np.ndarray
    meta: dict = field(default_factory=dict)
    pinch_times: np.ndarray = field(default_factory=lambda: np.zeros(0))


def head_on_imu_clock(rec: Recording):
    """Head poses resampled onto IMU timestamps, at wire (float32) precision."""
    pos, quat = geom.cubic_resample(rec.head_t, rec.head_pos, rec.head_quat, rec.imu_t)
    return pos.astype(np.float32).astype(np.float64), quat.astype(np.float32).astype(np.float64)


def recording_features(rec: Recording) -> RecordingFeatures:
    head_pos, head_quat = head_on_imu_clock(rec)
    ekf_q = run_ekf(rec.imu_t, rec.accel, rec.gyro)
    x = input_rows(rec.accel, rec.gyro, head_pos, geom.normalize(head_quat), ekf_q)
    return RecordingFeatures(imu_t=rec.imu_t, x=x, wrist_pos=rec.wrist_pos,
                             wrist_6d=geom.quat_to_6d(rec.wrist_quat), wrist_quat=rec.wrist_quat,
                             ekf_quat=ekf_q, meta=rec.meta, pinch_times=rec.pinch_times)


def recording_visibility(rec: Recording, fov: FovConfig):
    return visibility_mask(rec.imu_t, rec.head_t, rec.head_pos, geom.normalize(rec.head_quat),
                           rec.headset_wrist_pos, fov)


def visible_frames(rec: Recording, vis):
    """Indices of headset frames that saw the hand, and where they were consumed."""
    idx = consumed_index(rec.imu_t, rec.head_t)
    ok = idx < len(rec.imu_t)
    frames = np.flatnonzero(ok)
    frames = frames[vis[idx[frames]]]
    return frames, idx[frames]


def prior_for_exit(rec: Recording, frames, consumed, exit_index):
    k = np.searchsorted(consumed, exit_index, side="left")
    if k < PRIOR_LEN:
        return None, None
    sel = frames[k - PRIOR_LEN:k]
    s = prior_rows(rec.headset_wrist_pos[sel], geom.normalize(rec.headset_wrist_quat[sel]),
                   rec.head_pos[sel], geom.normalize(rec.head_quat[sel]))
    return s, sel


@dataclass
class Sequence:
    rec: int
    fov: float
    start: int
    stop: int  # exclusive; stop - start is a multiple of the downsample factor
    prior: np.ndarray  # (5, 18)
    full_stop: int = -1  # end of the out-of-view segment before truncation
    prior_t: np.ndarray | None = None  # headset timestamps of the prior frames
    prior_index: np.ndarray | None = None  # IMU index at which each prior frame was consumed

    @property
    def length(self):
        return self.stop - self.start

    def target_index(self, downsample=8):
        return np.arange(self.start + downsample - 1, self.stop, downsample)


def segment_sequences(rec: Recording, rec_id: int, fov_deg: float, cfg: DatasetConfig,
                      quantum: int | None = None, imu_rate: float | None = None):
    """Sequences for every usable out-of-view segment of one recording."""
    quantum = quantum or cfg.downsample
    rate = imu_rate or float(rec.meta.get("imu_rate", 427.0))
    cap = int(cfg.max_seq_s * rate) // cfg.downsample * cfg.downsample
    vis, tracked = recording_visibility(rec, cfg.fov(fov_deg))
    segments, dropped = segments_from_mask(vis, tracked)
    frames, consumed = visible_frames(rec, vis)
    out = []
    for a, b in segments:
        length = min(b - a, cap) // quantum * quantum
        if length < cfg.downsample:
            continue
        s, sel = prior_for_exit(rec, frames, consumed, a)
        out.append(Sequence(rec=rec_id, fov=float(fov_deg), start=a, stop=a + length, prior=s,
                            full_stop=b, prior_t=rec.head_t[sel],
                            prior_index=consumed_index(rec.imu_t, rec.head_t[sel])))
    return out, dropped


@dataclass
class Dataset:
    features: list  # RecordingFeatures per recording (float32 storage)
    sequences: dict  # split -> list[Sequence]
    split_recs: dict  # split -> list of recording ids
    cfg: DatasetConfig
    seed: int
    dropped: int = 0
    names: list = field(default_factory=list)

    def x(self, seq: Sequence):
        return self.features[seq.rec].x[seq.start:seq.stop].astype(np.float64)

    def s(self, seq: Sequence):
        return seq.prior

    def targets(self, seq: Sequence):
        idx = seq.target_index(self.cfg.downsample)
        f = self.features[seq.rec]
        return f.wrist_pos[idx].astype(np.float64), f.wrist_6d[idx].astype(np.float64)


def split_recordings(n: int, fractions, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    counts = np.floor(np.asarray(fractions) * n).astype(int)
    # hand leftovers to the splits with the largest remainders
    rem = np.asarray(fractions) * n - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {name: sorted(order[bounds[i]:bounds[i + 1]].tolist()) for i, name in enumerate(SPLITS)}


def build_dataset(recordings, cfg: DatasetConfig | None = None, seed: int = 0,
                  train_quantum: int | None = None, names=None) -> Dataset:
    """Session-disjoint train/val/test sequences over the FOV grid.

    ``train_quantum`` overrides ``cfg.length_quantum`` for the train split
    only; val/test keep full segment lengths (multiple of the downsample).
    """
    cfg = cfg or DatasetConfig()
    recordings = list(recordings)
    split_recs = split_recordings(len(recordings), cfg.split, seed)
    features = []
    for rec in recordings:
        f = recording_features(rec)
        f.x = f.x.astype(np.float32)
        f.wrist_pos = f.wrist_pos.astype(np.float32)
        f.wrist_6d = f.wrist_6d.astype(np.float32)
        features.append(f)
    sequences = {name: [] for name in SPLITS}
    dropped = 0
    for name, ids in split_recs.items():
        quantum = (train_quantum or cfg.length_quantum) if name == "train" else cfg.downsample
        for rid in ids:
            for fov in cfg.fov_grid:
                seqs, d = segment_sequences(recordings[rid], rid, fov, cfg, quantum)
                sequences[name].extend(seqs)
                dropped += d
    for name, frac in zip(SPLITS, cfg.split):
        if frac > 0 and not sequences[name]:
            raise EmptySplit(f"split '{name}' has no out-of-view sequences")
    return Dataset(features=features, sequences=sequences, split_recs=split_recs, cfg=cfg,
                   seed=seed, dropped=dropped, names=list(names or range(len(recordings))))


def write_manifest(path, recording_files, cfg: DatasetConfig, seed: int, dataset: Dataset | None = None,
                   train_quantum: int | None = None, recordings_dir: str = "."):
    """JSON description from which ``dataset_from_manifest`` rebuilds the dataset.

    ``recordings_dir`` is relative to the manifest's directory.
    """
    files = [str(Path(p).name) for p in recording_files]
    split_recs = dataset.split_recs if dataset else split_recordings(len(files), cfg.split, seed)
    doc = {
        "schema_version": 1,
        "seed": seed,
        "recordings_dir": str(recordings_dir),
        "config": asdict(cfg),
        "train_quantum": train_quantum,
        "recordings": files,
        "splits": {k: [files[i] for i in v] for k, v in split_recs.items()},
    }
    if dataset is not None:
        doc["counts"] = {k: len(v) for k, v in dataset.sequences.items()}
        doc["dropped_segments"] = dataset.dropped
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_manifest(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    cfg = doc["config"]
    cfg = DatasetConfig(**{**cfg, "fov_grid": tuple(cfg["fov_grid"]), "split": tuple(cfg["split"])})
    base = path.parent / doc.get("recordings_dir", ".")
    files = [base / f for f in doc["recordings"]]
    return doc, cfg, files


def dataset_from_manifest(path, recordings_dir=None, fov_grid=None) -> Dataset:
    """Rebuild a dataset; ``fov_grid`` re-cuts the same split at other FOVs."""
    doc, cfg, files = load_manifest(path)
    if recordings_dir is not None:
        files = [Path(recordings_dir) / f.name for f in files]
    if fov_grid is not None:
        cfg = DatasetConfig(**{**asdict(cfg), "fov_grid": tuple(float(f) for f in fov_grid)})
    recs = [Recording.load(f) for f in files]
    return build_dataset(recs, cfg, doc["seed"], doc.get("train_quantum"), names=doc["recordings"])
