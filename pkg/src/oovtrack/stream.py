"""Binary wire protocol and the real-time estimation service.

Frame layout (little-endian)::

    0xAA 0x55 | type u8 | length u16 | payload | crc16 u16

The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF) over
type + length + payload. See docs/protocol.md for the payload layouts.
"""
from __future__ import annotations

import asyncio
import binascii
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geom
from .dataset import (DatasetConfig, head_on_imu_clock, recording_features, recording_visibility,
                      segment_sequences)
from .ekf import EkfConfig, ImuSample, ekf_init, ekf_step
from .fov import (FovConfig, InView, OutOfView, PoseSource, PriorUnavailable, TrackedFrame,
                  consumed_index, prior_matrix, tracker_step)
from .geom import Pose
from .model import PoseEstimator
from .pinch import PinchDetector, detect_pinches, pinch_update
from .synth import Recording

log = logging.getLogger(__name__)

SYNC = b"\xaa\x55"
HEADER = struct.Struct("<BH")
CRC = struct.Struct("<H")
MAX_PAYLOAD = 1024


class CrcMismatch(ValueError):
    def __init__(self, msg, skip):
        super().__init__(msg)
        self.skip = skip


class UnknownType(ValueError):
    def __init__(self, msg, skip):
        super().__init__(msg)
        self.skip = skip


def crc16(data: bytes) -> int:
    return binascii.crc_hqx(data, 0xFFFF)


# --- messages -----------------------------------------------------------------

def _vec(values, n):
    v = tuple(float(x) for x in np.asarray(values, dtype=float).reshape(-1))
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {len(v)}")
    return v


@dataclass(frozen=True)
class ImuMsg:
    t: float
    accel: tuple
    gyro: tuple
    TYPE = 0x01
    FORMAT = struct.Struct("<d6f")

    def fields(self):
        return (self.t, *_vec(self.accel, 3), *_vec(self.gyro, 3))

    @classmethod
    def from_fields(cls, v):
        return cls(v[0], v[1:4], v[4:7])


@dataclass(frozen=True)
class HeadPoseMsg:
    t: float
    position: tuple
    quat: tuple
    TYPE = 0x02
    FORMAT = struct.Struct("<d7f")

    def fields(self):
        return (self.t, *_vec(self.position, 3), *_vec(self.quat, 4))

    @classmethod
    def from_fields(cls, v):
        return cls(v[0], v[1:4], v[4:8])


@dataclass(frozen=True)
class TrackedWristMsg:
    """One headset frame: tracked wrist pose plus the head pose of that frame."""
    t: float
    wrist_pos: tuple
    wrist_quat: tuple
    head_pos: tuple
    head_quat: tuple
    TYPE = 0x03
    FORMAT = struct.Struct("<d14f")

    def fields(self):
        return (self.t, *_vec(self.wrist_pos, 3), *_vec(self.wrist_quat, 4), *_vec(self.head_pos, 3),
                *_vec(self.head_quat, 4))

    @classmethod
    def from_fields(cls, v):
        return cls(v[0], v[1:4], v[4:8], v[8:11], v[11:15])


@dataclass(frozen=True)
class PoseEstimateMsg:
    t: float
    position: tuple
    rot6d: tuple
    source: float  # PoseSource value: 0 headset, 1 model
    TYPE = 0x81
    FORMAT = struct.Struct("<d10f")

    def fields(self):
        return (self.t, *_vec(self.position, 3), *_vec(self.rot6d, 6), float(self.source))

    @classmethod
    def from_fields(cls, v):
        return cls(v[0], v[1:4], v[4:10], v[10])


@dataclass(frozen=True)
class PinchEventMsg:
    t: float
    score: float
    TYPE = 0x82
    FORMAT = struct.Struct("<df")

    def fields(self):
        return (self.t, float(self.score))

    @classmethod
    def from_fields(cls, v):
        return cls(v[0], v[1])


MESSAGE_TYPES = {c.TYPE: c for c in (ImuMsg, HeadPoseMsg, TrackedWristMsg, PoseEstimateMsg, PinchEventMsg)}


def encode_frame(msg) -> bytes:
    payload = msg.FORMAT.pack(*msg.fields())
    body = HEADER.pack(msg.TYPE, len(payload)) + payload
    return SYNC + body + CRC.pack(crc16(body))


def decode_frame(data: bytes, start: int = 0):
    """Decode the first frame in ``data[start:]``.

    Returns ``(msg, consumed)``; ``msg`` is None when no complete frame is
    available yet (``consumed`` then counts leading bytes that can never
    start a frame). A corrupt header or CRC raises CrcMismatch and an
    unregistered type raises UnknownType; both carry ``skip``, the number of
    bytes to drop before trying again.
    """
    i = data.find(SYNC, start)
    if i < 0:
        # keep a trailing 0xAA, it may be the first half of a sync word
        end = len(data) - (1 if data[-1:] == SYNC[:1] else 0)
        return None, max(end - start, 0)
    if len(data) < i + 5:
        return None, i - start
    mtype, length = HEADER.unpack_from(data, i + 2)
    cls = MESSAGE_TYPES.get(mtype)
    if length > MAX_PAYLOAD or (cls is not None and length != cls.FORMAT.size):
        raise CrcMismatch(f"implausible length {length} for type 0x{mtype:02x}", skip=i + 1 - start)
    end = i + 5 + length + 2
    if len(data) < end:
        return None, i - start
    body = data[i + 2:i + 5 + length]
    (crc,) = CRC.unpack_from(data, end - 2)
    if crc != crc16(body):
        raise CrcMismatch(f"crc mismatch for type 0x{mtype:02x}", skip=i + 1 - start)
    if cls is None:
        raise UnknownType(f"unknown message type 0x{mtype:02x}", skip=end - start)
    return cls.from_fields(cls.FORMAT.unpack_from(body, 3)), end - start


@dataclass
class FrameDecoder:
    """Incremental decoder that resynchronises after corruption."""
    buffer: bytearray = field(default_factory=bytearray)
    skipped: int = 0  # bytes discarded while searching for a frame
    crc_errors: int = 0
    unknown: int = 0
    frames: int = 0

    def feed(self, data: bytes):
        self.buffer.extend(data)
        buf = bytes(self.buffer)
        pos, out = 0, []
        while pos < len(buf):
            try:
                msg, used = decode_frame(buf, pos)
            except CrcMismatch as e:
                self.crc_errors += 1
                self.skipped += e.skip
                pos += e.skip
                continue
            except UnknownType as e:
                self.unknown += 1
                pos += e.skip
                continue
            pos += used
            if msg is None:
                self.skipped += used
                break
            self.frames += 1
            out.append(msg)
        del self.buffer[:pos]
        return out


def decode_stream(data: bytes):
    dec = FrameDecoder()
    return dec.feed(data), dec


# --- estimation session ---------------------------------------------------------

@dataclass(frozen=True)
class ServiceConfig:
    fov: FovConfig = FovConfig()
    ekf: EkfConfig = EkfConfig()
    downsample: int = 8
    max_seq_s: float = 15.0
    imu_rate: float = 427.0

    @property
    def max_samples(self):
        return int(self.max_seq_s * self.imu_rate) // self.downsample * self.downsample


class Session:
    """Per-connection pipeline: EKF, pinch detector, hand-off state machine, model.

    Processing is driven by IMU messages; head poses and tracked-wrist
    frames received before an IMU message are used when that sample is
    processed. Outputs are returned as messages.
    """

    def __init__(self, model: Optional[PoseEstimator], cfg: ServiceConfig = ServiceConfig()):
        self.model = model
        self.cfg = cfg
        self.ekf = None
        self.last_t = None
        self.pinch = PinchDetector()
        self.tracker = InView()
        self.head: Optional[Pose] = None
        self.pending: Optional[TrackedFrame] = None
        self.prior_s = None
        self.dropped_frames = 0

    def handle(self, msg):
        if isinstance(msg, TrackedWristMsg):
            if self.pending is not None:
                self.dropped_frames += 1
            self.pending = TrackedFrame(msg.t, Pose(np.array(msg.wrist_pos), np.array(msg.wrist_quat)),
                                        Pose(np.array(msg.head_pos), np.array(msg.head_quat)))
            return []
        if isinstance(msg, HeadPoseMsg):
            self.head = Pose(np.array(msg.position), np.array(msg.quat))
            return []
        if isinstance(msg, ImuMsg):
            return self._imu(msg)
        log.warning("ignoring unexpected message %s", type(msg).__name__)
        return []

    def _imu(self, msg: ImuMsg):
        sample = ImuSample(msg.t, np.array(msg.accel), np.array(msg.gyro))
        if self.ekf is None:
            self.ekf = ekf_init(sample.accel, self.cfg.ekf)
        else:
            self.ekf = ekf_step(self.ekf, sample, msg.t - self.last_t)
        self.last_t = msg.t
        out = []
        self.pinch, event = pinch_update(self.pinch, sample)
        if event is not None:
            out.append(PinchEventMsg(event.t, event.score))
        if self.head is None:
            return out
        frame, self.pending = self.pending, None
        was_out = isinstance(self.tracker, OutOfView)
        try:
            self.tracker, source = tracker_step(self.tracker, frame, self.head, sample, self.ekf.q, self.cfg.fov)
        except PriorUnavailable as e:
            log.info("%s", e)
            self.tracker, source = e.state, PoseSource.NONE
        if source is PoseSource.HEADSET and frame is not None:
            out.append(PoseEstimateMsg(frame.t, frame.wrist.position, geom.quat_to_6d(frame.wrist.orientation),
                                       float(PoseSource.HEADSET.value)))
        elif source is PoseSource.MODEL and self.model is not None:
            if not was_out:
                self.prior_s = prior_matrix(self.tracker.prior)
            n = len(self.tracker.buffer)
            if n % self.cfg.downsample == 0 and n <= self.cfg.max_samples:
                pos, rot = self.model.infer(np.stack(self.tracker.buffer), self.prior_s)
                out.append(PoseEstimateMsg(msg.t, pos[-1], rot[-1], float(PoseSource.MODEL.value)))
        return out

    def feed(self, messages):
        out = []
        for m in messages:
            out.extend(self.handle(m))
        return out


def process_bytes(model, data: bytes, cfg: ServiceConfig = ServiceConfig()) -> bytes:
    """Run one session over an encoded byte stream and return the encoded output."""
    msgs, _ = decode_stream(data)
    return b"".join(encode_frame(m) for m in Session(model, cfg).feed(msgs))


# --- replay and offline reference -------------------------------------------------

def replay_messages(rec: Recording):
    """Messages a client streams for a recording, in wire order.

    Per IMU sample: tracked-wrist frames consumed at that sample, then the
    head pose resampled to the IMU clock, then the IMU reading.
    """
    head_pos, head_quat = head_on_imu_clock(rec)
    idx = consumed_index(rec.imu_t, rec.head_t)
    by_sample = {}
    for j, i in enumerate(idx):
        if i < len(rec.imu_t):
            by_sample.setdefault(int(i), []).append(j)
    for i in range(len(rec.imu_t)):
        for j in by_sample.get(i, ()):
            yield TrackedWristMsg(rec.head_t[j], rec.headset_wrist_pos[j], rec.headset_wrist_quat[j],
                                  rec.head_pos[j], rec.head_quat[j])
        yield HeadPoseMsg(rec.imu_t[i], head_pos[i], head_quat[i])
        yield ImuMsg(rec.imu_t[i], rec.accel[i], rec.gyro[i])


def encode_recording(rec: Recording) -> bytes:
    return b"".join(encode_frame(m) for m in replay_messages(rec))


def offline_outputs(rec: Recording, model: Optional[PoseEstimator], cfg: ServiceConfig = ServiceConfig()):
    """Batch reference for a recording: headset echoes, model outputs and pinches.

    Each out-of-view segment is run through the model once, as a whole.
    Returns the messages in the order the service emits them.
    """
    dcfg = DatasetConfig(fov_grid=(cfg.fov.horizontal_fov_deg,), downsample=cfg.downsample,
                         max_seq_s=cfg.max_seq_s, vertical_fov_deg=cfg.fov.vertical_fov_deg,
                         hysteresis_deg=cfg.fov.hysteresis_deg)
    vis, _ = recording_visibility(rec, dcfg.fov(cfg.fov.horizontal_fov_deg))
    timed = []  # (imu index, order within sample, message)
    for e in detect_pinches(rec.imu_t, rec.accel):
        timed.append((int(np.searchsorted(rec.imu_t, e.t)), 0, PinchEventMsg(e.t, e.score)))
    idx = consumed_index(rec.imu_t, rec.head_t)
    for j, i in enumerate(idx):
        if i < len(rec.imu_t) and vis[i]:
            wq = geom.normalize(np.asarray(rec.headset_wrist_quat[j], dtype=float))
            timed.append((int(i), 1, PoseEstimateMsg(rec.head_t[j], rec.headset_wrist_pos[j], geom.quat_to_6d(wq),
                                                     float(PoseSource.HEADSET.value))))
    if model is not None:
        feats = recording_features(rec)
        seqs, _ = segment_sequences(rec, 0, cfg.fov.horizontal_fov_deg, dcfg, imu_rate=cfg.imu_rate)
        for q in seqs:
            pos, rot = model.infer(feats.x[q.start:q.stop], q.prior)
            for k, i in enumerate(q.target_index(cfg.downsample)):
                timed.append((int(i), 1, PoseEstimateMsg(rec.imu_t[i], pos[k], rot[k],
                                                         float(PoseSource.MODEL.value))))
    timed.sort(key=lambda x: (x[0], x[1]))
    return [m for _, _, m in timed]


# --- TCP transport ----------------------------------------------------------------

async def _serve_connection(reader, writer, model, cfg):
    peer = writer.get_extra_info("peername")
    log.info("session opened %s", peer)
    session, decoder = Session(model, cfg), FrameDecoder()
    try:
        while True:
            data = await reader.read(65536)
            if not data:
                break
            out = session.feed(decoder.feed(data))
            if out:
                writer.write(b"".join(encode_frame(m) for m in out))
                await writer.drain()
        log.info("session closed %s: %d frames, %d crc errors, %d skipped bytes",
                 peer, decoder.frames, decoder.crc_errors, decoder.skipped)
    except (ConnectionError, asyncio.IncompleteReadError) as e:
        log.warning("connection %s failed: %s", peer, e)
    except Exception:
        log.exception("session %s aborted; state discarded", peer)
    finally:
        try:
            writer.close()
            await writer.wait_closed()
        except ConnectionError:
            pass


async def start_service(host: str, port: int, model, cfg: ServiceConfig = ServiceConfig()):
    """Start the TCP service; returns the asyncio server (port 0 picks a free port)."""
    return await asyncio.start_server(lambda r, w: _serve_connection(r, w, model, cfg), host, port)


def run_service(host: str, port: int, model, cfg: ServiceConfig = ServiceConfig()):
    """Serve until interrupted."""
    async def main():
        server = await start_service(host, port, model, cfg)
        log.info("listening on %s", ", ".join(str(s.getsockname()) for s in server.sockets))
        async with server:
            await server.serve_forever()
    asyncio.run(main())


async def replay_async(rec: Recording, host: str, port: int, chunk: int = 4096):
    """Stream a recording to a service and collect everything it sends back."""
    reader, writer = await asyncio.open_connection(host, port)
    data = encode_recording(rec)

    async def send():
        for i in range(0, len(data), chunk):
            writer.write(data[i:i + chunk])
            await writer.drain()
        writer.write_eof()

    async def receive():
        parts = []
        while True:
            part = await reader.read(65536)
            if not part:
                return b"".join(parts)
            parts.append(part)

    _, received = await asyncio.gather(send(), receive())
    writer.close()
    return received


def replay(rec: Recording, host: str, port: int):
    received = asyncio.run(replay_async(rec, host, port))
    msgs, _ = decode_stream(received)
    return msgs
