"""Command-line entry point: ``oovtrack <command> ...``.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 runtime error.
Set ``HOOV_LOG`` (DEBUG, INFO, WARNING, ERROR) to control log verbosity.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
DATASET_MANIFEST = "dataset.json"
SESSIONS_MANIFEST = "sessions.json"

log = logging.getLogger("oovtrack")


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


def _session_seed(seed: int, i: int) -> int:
    return seed * 1_000 + i


def _parse_addr(addr: str):
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address must look like HOST:PORT, got {addr!r}")
    return host, int(port)


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in value.replace(",", " ").split())
    return value.strip()


def dataclass_from_section(cls, section, overrides=None):
    """Build a config dataclass from a configparser section plus overrides."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    base = cls()
    values = {}
    for key, raw in (section or {}).items():
        if key not in fields:
            raise DataError(f"unknown {cls.__name__} key '{key}'")
        try:
            values[key] = _coerce(raw, getattr(base, key))
        except ValueError as e:
            raise DataError(f"bad value for {key}: {raw!r}") from e
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid {cls.__name__}: {e}") from e


def read_config(path):
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise DataError(f"config file not found: {path}")
        cp.read(path)
    return cp


def _section(cp, name):
    return dict(cp[name]) if cp.has_section(name) else {}


# --- commands -----------------------------------------------------------------------

def cmd_synth(args):
    from .synth import generate_session
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.sessions):
        s = _session_seed(args.seed, i)
        name = f"session_{i:04d}.rec"
        generate_session(s, duration=args.duration).save(out / name)
        files.append({"file": name, "seed": s})
        log.info("wrote %s", name)
    (out / SESSIONS_MANIFEST).write_text(json.dumps(
        {"seed": args.seed, "duration": args.duration, "sessions": files}, indent=2))
    print(f"{args.sessions} sessions written to {out}")
    return EXIT_OK


def _recording_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    man = d / SESSIONS_MANIFEST
    if man.is_file():
        files = [d / s["file"] for s in json.loads(man.read_text())["sessions"]]
    else:
        files = sorted(d.glob("*.rec"))
    if not files:
        raise DataError(f"no recordings in {d}")
    missing = [f for f in files if not f.is_file()]
    if missing:
        raise DataError(f"missing recording {missing[0]}")
    return files


def _load_recordings(files):
    from .synth import Recording
    try:
        return [Recording.load(f) for f in files]
    except (ValueError, KeyError, OSError) as e:
        raise DataError(f"cannot read recording: {e}") from e


def cmd_dataset(args):
    from .dataset import DatasetConfig, build_dataset, write_manifest
    if args.fov_step <= 0 or args.fov_max < args.fov_min:
        raise UsageError("need fov-step > 0 and fov-max >= fov-min")
    grid = tuple(float(f) for f in np.arange(args.fov_min, args.fov_max + 1e-9, args.fov_step))
    try:
        cfg = DatasetConfig(fov_grid=grid, max_seq_s=args.max_seq_s)
    except ValueError as e:
        raise UsageError(str(e)) from e
    files = _recording_files(args.input)
    recs = _load_recordings(files)
    ds = build_dataset(recs, cfg, args.seed, args.train_quantum, names=[f.name for f in files])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / DATASET_MANIFEST, files, cfg, args.seed, ds, args.train_quantum,
                   recordings_dir=os.path.relpath(Path(args.input).resolve(), out.resolve()))
    rows = []
    for split, seqs in ds.sequences.items():
        for fov in grid:
            sel = [q for q in seqs if q.fov == fov]
            rows.append({"split": split, "fov": fov, "sequences": len(sel),
                         "seconds": sum(q.length for q in sel) / 427.0})
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["split", "fov", "sequences", "seconds"])
        w.writeheader()
        w.writerows(rows)
    counts = ", ".join(f"{k}={len(v)}" for k, v in ds.sequences.items())
    print(f"{len(recs)} sessions x {len(grid)} FOVs: {counts} sequences ({ds.dropped} segments dropped)")
    return EXIT_OK


def _load_dataset(data_dir, fovs=None):
    from .dataset import dataset_from_manifest
    man = Path(data_dir) / DATASET_MANIFEST
    if not man.is_file():
        raise DataError(f"no {DATASET_MANIFEST} in {data_dir}")
    try:
        return dataset_from_manifest(man, fov_grid=fovs)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot build dataset from {man}: {e}") from e


def cmd_train(args):
    from .model import ModelConfig, PoseEstimator
    from .train import TrainConfig, train
    cp = read_config(args.config)
    mcfg = dataclass_from_section(ModelConfig, _section(cp, "model"))
    tcfg = dataclass_from_section(TrainConfig, _section(cp, "train"), {
        "max_iters": args.max_iters, "seed": args.seed, "checkpoint_dir": str(args.out)})
    ds = _load_dataset(args.data)
    model = PoseEstimator(mcfg)
    log.info("model has %d parameters", model.num_params())
    best = train(model, ds, tcfg, resume=args.resume)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def _load_model(path):
    from .model import load_checkpoint
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)[0]
    except (ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


def cmd_eval(args):
    from .evaluation import evaluate, selection_rates, write_report
    fovs = tuple(float(f) for f in args.fov.split(",") if f.strip())
    if not fovs:
        raise UsageError("--fov needs at least one value")
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args.data, fovs)
    if not ds.sequences[args.split]:
        raise DataError(f"split '{args.split}' has no sequences")
    results, seqs, estimates = evaluate(model, ds, args.split, fovs, args.horizon)
    pinch_times = [f.pinch_times for f in ds.features]
    selection = {m: selection_rates(ds, seqs, est, pinch_times) for m, est in estimates.items()}
    rows = write_report(args.report, results, selection, args.horizon, figures=not args.no_figures)
    for r in rows:
        print(f"{r['method']:>15s} fov {r['fov']:5.1f}: mean {r['mean_pos_cm']:8.2f} cm, "
              f"median {r['median_pos_cm']:8.2f} cm, rot {r['mean_rot_deg']:6.1f} deg")
    return EXIT_OK


def cmd_serve(args):
    from .fov import FovConfig
    from .stream import ServiceConfig, run_service
    host, port = _parse_addr(args.listen)
    model = _load_model(args.checkpoint)
    cfg = ServiceConfig(fov=FovConfig(horizontal_fov_deg=args.fov))
    try:
        run_service(host, port, model, cfg)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_replay(args):
    from .stream import PinchEventMsg, PoseEstimateMsg, replay
    host, port = _parse_addr(args.connect)
    rec = _load_recordings([Path(args.file)])[0] if Path(args.file).is_file() else None
    if rec is None:
        raise DataError(f"recording not found: {args.file}")
    try:
        msgs = replay(rec, host, port)
    except OSError as e:
        print(f"error: cannot reach service at {args.connect}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    stream = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(stream)
        w.writerow(["kind", "t", "x", "y", "z", "r0", "r1", "r2", "r3", "r4", "r5", "source_or_score"])
        for m in msgs:
            if isinstance(m, PoseEstimateMsg):
                w.writerow(["pose", f"{m.t:.6f}", *(f"{v:.6g}" for v in m.position + m.rot6d), int(m.source)])
            elif isinstance(m, PinchEventMsg):
                w.writerow(["pinch", f"{m.t:.6f}", *[""] * 9, f"{m.score:.4f}"])
    finally:
        if args.out:
            stream.close()
    return EXIT_OK


def cmd_pinch(args):
    from .pinch import detect_pinches
    if not Path(args.file).is_file():
        raise DataError(f"recording not found: {args.file}")
    rec = _load_recordings([Path(args.file)])[0]
    print("t_s,score")
    for e in detect_pinches(rec.imu_t, rec.accel):
        print(f"{e.t:.6f},{e.score:.4f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="oovtrack", description="Out-of-view wrist tracking from a wrist IMU.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic recordings")
    s.add_argument("--sessions", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=60.0, help="seconds per session")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dataset", help="cut out-of-view sequences over a FOV grid")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--fov-min", type=float, default=40.0)
    s.add_argument("--fov-max", type=float, default=120.0)
    s.add_argument("--fov-step", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-seq-s", type=float, default=15.0)
    s.add_argument("--train-quantum", type=int, default=None,
                   help="cut training sequences to a multiple of this many samples")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train the estimator")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="key = value file with [model] and [train] sections")
    s.add_argument("--out", required=True)
    s.add_argument("--max-iters", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--resume", default=None, help="checkpoint written by a previous run (last.ckpt)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint and write a report")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fov", default="140,120,90", help="comma-separated horizontal FOVs in degrees")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--horizon", type=float, default=None, help="only score the first N seconds out of view")
    s.add_argument("--report", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the streaming estimation service")
    s.add_argument("--listen", default="127.0.0.1:7450")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fov", type=float, default=140.0)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("replay", help="stream a recording to a running service")
    s.add_argument("--file", required=True)
    s.add_argument("--connect", default="127.0.0.1:7450")
    s.add_argument("--out", default=None, help="CSV of received poses and pinches (default stdout)")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("pinch", help="offline pinch detection")
    s.add_argument("--file", required=True)
    s.set_defaults(func=cmd_pinch)
    return p


def _setup_logging():
    level = os.environ.get("HOOV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    from .synth import EmptySplit
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptySplit) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
