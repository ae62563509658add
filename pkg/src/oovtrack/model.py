"""Out-of-view wrist pose estimator.

Pipeline per sequence:

1. a 2-layer Elman RNN reads the 5 last headset-tracked (wrist, head) rows
   and its final top-layer state is projected to one prior token;
2. three blocks of (conv, relu, conv, relu, maxpool/2) downsample the
   21-wide IMU/head rows by 8, then a linear layer embeds them;
3. [prior token | embeddings] plus sinusoidal positions pass through
   post-norm Transformer encoder layers with a causal mask;
4. two MLP heads map every non-token output to a position and a 6D rotation.

Convolutions are causal (left padding) so an output step never depends on
IMU samples after the end of its 8-sample window.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geom
from .autodiff import ShapeMismatch, Tensor
from .features import INPUT_WIDTH, PRIOR_WIDTH
from .fov import PRIOR_LEN

# parameter count of the reference architecture; its conv widths and head depths
# are unknown, so the default config here ends up smaller
REFERENCE_PARAM_COUNT = 4_408_199
CHECKPOINT_MAGIC = b"OOVCKPT\x01"
CHECKPOINT_SCHEMA = 1
PINCH_OFFSET = np.array([0.0, -0.15, 0.0])


class TooShort(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    heads: int = 8
    ff_dim: int = 2048
    encoder_layers: int = 2
    rnn_layers: int = 2
    rnn_hidden: int = 256
    conv_channels: tuple = (64, 128, 256)
    kernel: int = 3
    downsample_factor: int = 8
    max_seq_s: float = 15.0
    head_hidden: tuple = (128,)
    imu_rate: float = 427.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.downsample_factor != 2 ** len(self.conv_channels):
            raise ValueError("downsample_factor must equal 2 ** (number of conv blocks)")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("conv_channels", "head_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every trainable tensor, in declaration order."""
    shapes = OrderedDict()
    width = PRIOR_WIDTH
    for i in range(cfg.rnn_layers):
        shapes[f"rnn.{i}.w_ih"] = (width, cfg.rnn_hidden)
        shapes[f"rnn.{i}.w_hh"] = (cfg.rnn_hidden, cfg.rnn_hidden)
        shapes[f"rnn.{i}.b_ih"] = (cfg.rnn_hidden,)
        shapes[f"rnn.{i}.b_hh"] = (cfg.rnn_hidden,)
        width = cfg.rnn_hidden
    shapes["prior.w"] = (cfg.rnn_hidden, cfg.embed_dim)
    shapes["prior.b"] = (cfg.embed_dim,)
    cin = INPUT_WIDTH
    for b, cout in enumerate(cfg.conv_channels):
        for j in range(2):
            shapes[f"conv.{b}.{j}.w"] = (cfg.kernel, cin, cout)
            shapes[f"conv.{b}.{j}.b"] = (cout,)
            cin = cout
    shapes["embed.w"] = (cin, cfg.embed_dim)
    shapes["embed.b"] = (cfg.embed_dim,)
    e = cfg.embed_dim
    for i in range(cfg.encoder_layers):
        p = f"enc.{i}."
        for n in ("q", "k", "v", "o"):
            shapes[p + f"w{n}"] = (e, e)
            shapes[p + f"b{n}"] = (e,)
        shapes[p + "ln1.g"] = (e,)
        shapes[p + "ln1.b"] = (e,)
        shapes[p + "ff1.w"] = (e, cfg.ff_dim)
        shapes[p + "ff1.b"] = (cfg.ff_dim,)
        shapes[p + "ff2.w"] = (cfg.ff_dim, e)
        shapes[p + "ff2.b"] = (e,)
        shapes[p + "ln2.g"] = (e,)
        shapes[p + "ln2.b"] = (e,)
    for head, out in (("pos", 3), ("rot", 6)):
        width = e
        for j, h in enumerate(cfg.head_hidden):
            shapes[f"{head}.{j}.w"] = (width, h)
            shapes[f"{head}.{j}.b"] = (h,)
            width = h
        shapes[f"{head}.out.w"] = (width, out)
        shapes[f"{head}.out.b"] = (out,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))


def default_buffers():
    """Fixed input/output scaling; fitted on training data, not trained."""
    return {
        "x_mean": np.zeros(INPUT_WIDTH), "x_std": np.ones(INPUT_WIDTH),
        "s_mean": np.zeros(PRIOR_WIDTH), "s_std": np.ones(PRIOR_WIDTH),
        "pos_mean": np.zeros(3), "pos_std": np.ones(3),
        "rot_mean": np.zeros(6), "rot_std": np.ones(6),
    }


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    m = np.zeros((length, length))
    m[np.triu_indices(length, 1)] = -np.inf
    return m


@dataclass
class PoseEstimate:
    position: np.ndarray
    rot6d: np.ndarray
    t: float = 0.0


@dataclass
class PoseEstimator:
    cfg: ModelConfig = field(default_factory=ModelConfig)
    params: "OrderedDict[str, Tensor]" = None
    buffers: dict = None

    def __post_init__(self):
        if self.params is None:
            self.params = OrderedDict(
                (k, Tensor(np.zeros(s), requires_grad=True)) for k, s in param_shapes(self.cfg).items())
        if self.buffers is None:
            self.buffers = default_buffers()

    def parameters(self):
        return list(self.params.values())

    def num_params(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # --- building blocks ---
    def _linear(self, x, name):
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def encode_prior(self, s) -> Tensor:
        """(B, 5, 18) prior rows -> (B, embed_dim) token."""
        s = ad.as_tensor(s)
        if s.ndim == 2:
            s = s.reshape(1, *s.shape)
        if s.ndim != 3 or s.shape[1:] != (PRIOR_LEN, PRIOR_WIDTH):
            raise ShapeMismatch(f"prior must be (B, {PRIOR_LEN}, {PRIOR_WIDTH}), got {s.shape}")
        bsz = s.shape[0]
        s = (s - self.buffers["s_mean"]) * (1.0 / self.buffers["s_std"])
        seq = [s[:, t, :] for t in range(PRIOR_LEN)]
        for i in range(self.cfg.rnn_layers):
            p = f"rnn.{i}."
            h = Tensor(np.zeros((bsz, self.cfg.rnn_hidden)))
            outs = []
            for x_t in seq:
                h = ad.tanh(x_t @ self.params[p + "w_ih"] + self.params[p + "b_ih"]
                            + h @ self.params[p + "w_hh"] + self.params[p + "b_hh"])
                outs.append(h)
            seq = outs
        return self._linear(seq[-1], "prior")

    def downsample(self, x) -> Tensor:
        """(B, L, 21) -> (B, L // 8, embed_dim); trailing samples are dropped."""
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[2] != INPUT_WIDTH:
            raise ShapeMismatch(f"input must be (B, L, {INPUT_WIDTH}), got {x.shape}")
        f = self.cfg.downsample_factor
        if x.shape[1] < f:
            raise TooShort(f"need at least {f} samples, got {x.shape[1]}")
        usable = x.shape[1] // f * f
        if usable != x.shape[1]:
            x = x[:, :usable, :]
        h = (x - self.buffers["x_mean"]) * (1.0 / self.buffers["x_std"])
        for b in range(len(self.cfg.conv_channels)):
            for j in range(2):
                p = f"conv.{b}.{j}."
                h = ad.relu(ad.conv1d(h, self.params[p + "w"], self.params[p + "b"]))
            h = ad.maxpool1d(h)
        return self._linear(h, "embed")

    def _encoder_layer(self, h, i, mask):
        p = f"enc.{i}."
        bsz, length, e = h.shape
        nh = self.cfg.heads
        dh = e // nh

        def split(t):
            return t.reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)

        q = split(h @ self.params[p + "wq"] + self.params[p + "bq"])
        k = split(h @ self.params[p + "wk"] + self.params[p + "bk"])
        v = split(h @ self.params[p + "wv"] + self.params[p + "bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask
        att = ad.softmax(scores, axis=-1) @ v
        att = att.transpose(0, 2, 1, 3).reshape(bsz, length, e)
        att = att @ self.params[p + "wo"] + self.params[p + "bo"]
        h = ad.layer_norm(h + att) * self.params[p + "ln1.g"] + self.params[p + "ln1.b"]
        ff = ad.relu(h @ self.params[p + "ff1.w"] + self.params[p + "ff1.b"])
        ff = ff @ self.params[p + "ff2.w"] + self.params[p + "ff2.b"]
        return ad.layer_norm(h + ff) * self.params[p + "ln2.g"] + self.params[p + "ln2.b"]

    def _head(self, h, name):
        for j in range(len(self.cfg.head_hidden)):
            h = ad.relu(self._linear(h, f"{name}.{j}"))
        return self._linear(h, f"{name}.out")

    def forward(self, x, s):
        """Returns (positions (B, T, 3), rot6d (B, T, 6)) as tensors, T = L // 8."""
        emb = self.downsample(x)
        token = self.encode_prior(s)
        if token.shape[0] != emb.shape[0]:
            raise ShapeMismatch(f"batch of x ({emb.shape[0]}) and s ({token.shape[0]}) differ")
        bsz, steps, e = emb.shape
        h = ad.concat([token.reshape(bsz, 1, e), emb], axis=1)
        h = h + positional_encoding(steps + 1, e)
        mask = causal_mask(steps + 1)
        for i in range(self.cfg.encoder_layers):
            h = self._encoder_layer(h, i, mask)
        out = h[:, 1:, :]
        pos = self._head(out, "pos") * self.buffers["pos_std"] + self.buffers["pos_mean"]
        rot = self._head(out, "rot") * self.buffers["rot_std"] + self.buffers["rot_mean"]
        return pos, rot

    def infer(self, x, s):
        """Inference on one sequence: (positions (T, 3), rot6d (T, 6)) arrays.

        Runs with shape-stable matrix products, so the outputs for a prefix
        of ``x`` are bit-identical to the leading outputs for all of ``x``.
        """
        with ad.shape_stable():
            pos, rot = self.forward(np.asarray(x, dtype=float)[None], np.asarray(s, dtype=float)[None])
        return pos.data[0], rot.data[0]

    def predict(self, x, s, times=None):
        """Like ``infer`` but returns a list of PoseEstimate."""
        pos, rot = self.infer(x, s)
        if times is None:
            times = np.zeros(len(pos))
        return [PoseEstimate(p, r, float(t)) for p, r, t in zip(pos, rot, times)]

    # --- persistence ---
    def save(self, path, meta=None, opt_state=None):
        return save_checkpoint(path, self, meta, opt_state)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)[0]


def loss(pred_pos, pred_rot, target_pos, target_rot):
    """Sum over steps of L1(position) + L1(6D rotation); batches are averaged.

    Accepts (T, .) or (B, T, .) shapes; targets may be arrays.
    """
    pred_pos, pred_rot = ad.as_tensor(pred_pos), ad.as_tensor(pred_rot)
    tp = np.asarray(target_pos, dtype=float)
    tr = np.asarray(target_rot, dtype=float)
    if pred_pos.shape != tp.shape or pred_rot.shape != tr.shape:
        raise LengthMismatch(
            f"prediction {pred_pos.shape}/{pred_rot.shape} vs target {tp.shape}/{tr.shape}")
    if pred_pos.shape[-2] < 1:
        raise LengthMismatch("empty sequence")
    total = ad.abs_(pred_pos - tp).sum() + ad.abs_(pred_rot - tr).sum()
    if pred_pos.ndim == 3:
        total = total * (1.0 / pred_pos.shape[0])
    return total


def refine_pinch_position(position, rotation) -> np.ndarray:
    """Pinch point 15 cm from the wrist along the wrist's -y axis (toward the fingers).

    ``rotation`` may be a 3x3 matrix, a quaternion or a 6D vector.
    """
    r = np.asarray(rotation, dtype=float)
    if r.shape == (4,):
        r = geom.quat_to_matrix(r)
    elif r.shape == (6,):
        r = geom.sixd_to_rot(r)
    return r @ PINCH_OFFSET + np.asarray(position, dtype=float)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: PoseEstimator, meta=None, opt_state=None):
    """JSON header + little-endian float32 blocks (params in declaration order,
    then buffers, then optional Adam moments)."""
    blocks = []
    for name, p in model.params.items():
        blocks.append(("param", name, p.data))
    for name, b in model.buffers.items():
        blocks.append(("buffer", name, np.asarray(b)))
    if opt_state is not None:
        for name, m in opt_state["m"].items():
            blocks.append(("adam_m", name, m))
        for name, v in opt_state["v"].items():
            blocks.append(("adam_v", name, v))
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": asdict(model.cfg),
        "meta": meta or {},
        "adam_step": None if opt_state is None else int(opt_state["t"]),
        "blocks": [{"kind": k, "name": n, "shape": list(np.shape(a))} for k, n, a in blocks],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for _, _, a in blocks:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Returns (model, header, opt_state or None)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    if header["schema_version"] != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema")
    cfg = ModelConfig.from_dict(header["config"])
    model = PoseEstimator(cfg)
    off = 12 + hlen
    opt = {"m": OrderedDict(), "v": OrderedDict(), "t": header.get("adam_step")}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(blk["shape"])
        off += 4 * n
        kind, name = blk["kind"], blk["name"]
        if kind == "param":
            if model.params[name].shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            model.params[name] = Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            model.buffers[name] = arr
        else:
            opt["m" if kind == "adam_m" else "v"][name] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return model, header, (opt if opt["t"] is not None else None)
