"""Adam training loop with validation, early stopping and resumable checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geom
from .dataset import Dataset
from .model import PoseEstimator, load_checkpoint, loss, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "train_loss", "val_mae_cm", "val_mad_deg")


class NonFiniteLoss(RuntimeError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value} on batch {batch_id}")
        self.batch_id = batch_id


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 20_000
    val_every: int = 500
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    patience: int = 20  # validations without improvement before stopping
    val_max_seqs: int = 0  # 0 = whole validation split
    # long batches are processed in chunks of at most this many IMU samples
    # with gradient accumulation (same gradient, bounded memory)
    max_batch_samples: int = 16_384

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")


def kaiming_bound(shape) -> float:
    fan_in = int(np.prod(shape[:-1]))
    return math.sqrt(6.0 / fan_in)


def init_params(model: PoseEstimator, seed: int) -> None:
    """Kaiming-uniform weights (variance 2 / fan_in), zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if p.ndim >= 2:
            bound = kaiming_bound(p.shape)
            p.data = rng.uniform(-bound, bound, p.shape)
        elif name.endswith(".g"):
            p.data = np.ones(p.shape)
        else:
            p.data = np.zeros(p.shape)
        p.grad = None


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: "OrderedDict[str, ad.Tensor]", lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros(p.shape)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros(p.shape)) for k, p in params.items())

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=float).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=float).reshape(self.v[k].shape)


def make_batches(lengths, batch_size: int, seed: int):
    """Index batches where every member has the same length.

    Sequences are grouped by length, shuffled within each group, chunked and
    the chunks shuffled; the order is a pure function of ``seed``.
    """
    rng = np.random.default_rng(seed)
    groups = defaultdict(list)
    for i, n in enumerate(lengths):
        groups[int(n)].append(i)
    batches = []
    for n in sorted(groups):
        idx = np.asarray(groups[n])[rng.permutation(len(groups[n]))]
        batches.extend(idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def epoch_batches(lengths, batch_size, seed, epoch):
    return make_batches(lengths, batch_size, seed * 100_003 + epoch)


def fit_normalization(model: PoseEstimator, dataset: Dataset, split="train"):
    """Set the model's input/prior/output scaling from a split's statistics.

    Input and target statistics cover every sample that lies in at least one
    sequence of the split (each sample counted once, whatever the FOV);
    prior statistics cover all prior rows.
    """
    seqs = dataset.sequences[split]
    by_rec = defaultdict(list)
    for q in seqs:
        by_rec[q.rec].append(q)
    acc = {k: [0.0, 0.0, 0] for k in ("x", "pos", "rot")}

    def add(key, a):
        acc[key][0] = acc[key][0] + a.sum(axis=0)
        acc[key][1] = acc[key][1] + (a * a).sum(axis=0)
        acc[key][2] += len(a)

    for rid, qs in by_rec.items():
        f = dataset.features[rid]
        mask = np.zeros(len(f.x), dtype=bool)
        for q in qs:
            mask[q.start:q.stop] = True
        add("x", f.x[mask].astype(np.float64))
        add("pos", f.wrist_pos[mask].astype(np.float64))
        add("rot", f.wrist_6d[mask].astype(np.float64))

    def stats(s1, s2, n):
        mean = s1 / n
        return mean, np.maximum(np.sqrt(np.maximum(s2 / n - mean * mean, 0.0)), 1e-3)

    pr = np.concatenate([q.prior for q in seqs])
    b = model.buffers
    b["x_mean"], b["x_std"] = stats(*acc["x"])
    b["s_mean"], b["s_std"] = stats(pr.sum(axis=0), (pr * pr).sum(axis=0), len(pr))
    b["pos_mean"], b["pos_std"] = stats(*acc["pos"])
    b["rot_mean"], b["rot_std"] = stats(*acc["rot"])


def collate(dataset: Dataset, seqs):
    x = np.stack([dataset.x(q) for q in seqs])
    s = np.stack([q.prior for q in seqs])
    t = [dataset.targets(q) for q in seqs]
    return x, s, np.stack([a for a, _ in t]), np.stack([b for _, b in t])


def train_step(model: PoseEstimator, batch, opt: Adam, batch_id=None, max_batch_samples=None) -> float:
    """One Adam step on a batch; returns the batch loss.

    With ``max_batch_samples`` the batch is split into chunks whose scaled
    gradients are accumulated before the update.
    """
    x, s, tp, tr = batch
    bsz = x.shape[0]
    chunk = bsz if not max_batch_samples else max(1, min(bsz, max_batch_samples // x.shape[1]))
    total = 0.0
    for i in range(0, bsz, chunk):
        sl = slice(i, i + chunk)
        pos, rot = model.forward(x[sl], s[sl])
        n = pos.shape[0]
        value = loss(pos, rot, tp[sl], tr[sl]) * (n / bsz)
        if not np.isfinite(value.data):
            opt.zero_grad()
            raise NonFiniteLoss(batch_id, float(value.data))
        ad.backward(value)
        total += float(value.data)
    opt.step()
    opt.zero_grad()
    return total


def pose_metrics(pos, rot, tp, tr):
    """Mean position error (cm) and mean rotation error (deg) over all steps."""
    pe = np.linalg.norm(pos - tp, axis=-1) * 100.0
    qa = geom.matrix_to_quat(geom.sixd_to_rot(rot.reshape(-1, 6)))
    qb = geom.matrix_to_quat(geom.sixd_to_rot(tr.reshape(-1, 6)))
    return float(pe.mean()), float(geom.quat_angle_diff(qa, qb).mean())


def evaluate_split(model: PoseEstimator, dataset: Dataset, split="val", max_seqs=0):
    seqs = dataset.sequences[split]
    if max_seqs and len(seqs) > max_seqs:
        # evenly spaced subset so every recording and FOV is represented
        seqs = [seqs[i] for i in np.unique(np.linspace(0, len(seqs) - 1, max_seqs).astype(int))]
    pe, re, n = 0.0, 0.0, 0
    lengths = [q.length for q in seqs]
    for idx in make_batches(lengths, max(1, 16_384 // max(lengths)), 0):
        x, s, tp, tr = collate(dataset, [seqs[i] for i in idx])
        pos, rot = model.forward(x, s)
        k = tp.shape[0] * tp.shape[1]
        mae, mad = pose_metrics(pos.data, rot.data, tp, tr)
        pe += mae * k
        re += mad * k
        n += k
    return pe / n, re / n


def train(model: PoseEstimator, dataset: Dataset, cfg: TrainConfig, resume=None, fit_norm=True) -> Path:
    """Train and return the path of the best-validation checkpoint.

    Writes ``train_log.csv``, ``best.ckpt`` and ``last.ckpt`` into
    ``cfg.checkpoint_dir``. With ``resume`` (a checkpoint saved by this
    function) parameters, Adam state and iteration count are restored and the
    log is appended to.
    """
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, best_path, last_path = out / "train_log.csv", out / "best.ckpt", out / "last.ckpt"
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    start, best, stale = 0, math.inf, 0
    if resume is not None:
        loaded, header, opt_state = load_checkpoint(resume)
        model.params, model.buffers = loaded.params, loaded.buffers
        opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if opt_state is not None:
            opt.load_state(opt_state)
        meta = header["meta"]
        start, best, stale = int(meta["iter"]), float(meta.get("best_val", math.inf)), int(meta.get("stale", 0))
        _truncate_log(log_path, start)
    else:
        init_params(model, cfg.seed)
        if fit_norm:
            fit_normalization(model, dataset)
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
    has_val = bool(dataset.sequences.get("val"))
    seqs = dataset.sequences["train"]
    if not seqs:
        raise ValueError("no training sequences")
    lengths = [q.length for q in seqs]
    it = start
    epoch, pos_in_epoch = divmod_epoch(lengths, cfg, start)
    with open(log_path, "a", newline="") as f:
        writer = csv.writer(f)
        while it < cfg.max_iters and stale < cfg.patience:
            batches = epoch_batches(lengths, cfg.batch_size, cfg.seed, epoch)
            for b in batches[pos_in_epoch:]:
                value = train_step(model, collate(dataset, [seqs[i] for i in b]), opt, batch_id=it,
                                   max_batch_samples=cfg.max_batch_samples)
                it += 1
                row = [it, f"{value:.6f}", "", ""]
                if it % cfg.val_every == 0 or it == cfg.max_iters:
                    if has_val:
                        mae, mad = evaluate_split(model, dataset, "val", cfg.val_max_seqs)
                    else:
                        mae, mad = evaluate_split(model, dataset, "train", cfg.val_max_seqs)
                    row[2:] = [f"{mae:.4f}", f"{mad:.4f}"]
                    log.info("iter %d loss %.4f val %.2f cm %.2f deg", it, value, mae, mad)
                    if mae < best:
                        best, stale = mae, 0
                        save_checkpoint(best_path, model, meta={"iter": it, "val_mae_cm": mae, "val_mad_deg": mad})
                    else:
                        stale += 1
                    save_checkpoint(last_path, model, opt_state=opt.state(),
                                    meta={"iter": it, "best_val": best, "stale": stale})
                writer.writerow(row)
                f.flush()
                if it >= cfg.max_iters or stale >= cfg.patience:
                    break
            epoch, pos_in_epoch = epoch + 1, 0
    if not best_path.exists():
        save_checkpoint(best_path, model, meta={"iter": it})
    return best_path


def _truncate_log(path: Path, last_iter: int):
    """Drop log rows written after the checkpoint a run resumes from."""
    if not path.exists():
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= last_iter]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def divmod_epoch(lengths, cfg: TrainConfig, iteration: int):
    """(epoch, batch offset) reached after ``iteration`` steps."""
    epoch = 0
    while True:
        n = len(epoch_batches(lengths, cfg.batch_size, cfg.seed, epoch))
        if iteration < n:
            return epoch, iteration
        iteration -= n
        epoch += 1
