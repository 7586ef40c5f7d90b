"""Binary wire formats for all client-server exchanges, plus traffic metering.

Frames are little-endian: magic 0x4D51 (u16), version (u8), type (u8), then
either a fixed-size body (overlap query and shared-map request, whose whole
frame is exactly 64 bytes) or a payload length (u32) followed by the payload.
Byte-level layouts are documented in docs/formats.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .params import FULL_KEYFRAME_BYTES

MAGIC = 0x4D51
VERSION = 1

T_OVERLAP_QUERY = 1
T_OVERLAP_RESPONSE = 2
T_KEYFRAME_UPLOAD = 3
T_SHARED_MAP_REQUEST = 4
T_SHARED_MAP_RESPONSE = 5
T_SESSION_REGISTER = 6
T_SESSION_END = 7
T_UPDATE_CHECK = 8
T_UPDATE_STATUS = 9
T_UPLOAD_ACK = 10
T_REGISTER_ACK = 11
T_END_ACK = 12
T_ERROR = 13

# Overlap query and shared-map request are fixed-function 64-byte frames:
# magic+version+type (4) + client u32 + keyframe u32 + np u16 + pose 6*f64 + pad 2.
FIXED_TYPES = {T_OVERLAP_QUERY, T_SHARED_MAP_REQUEST}
QUERY_FRAME_SIZE = 64
_FIXED_BODY = struct.Struct("<IIH6d")
_VAR_HEADER = struct.Struct("<HBBI")
_FIXED_PREFIX = struct.Struct("<HBB")


class DecodeError(ValueError):
    """Malformed frame; ``offset`` points at the first unusable byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


def _f32(x: float) -> float:
    return float(np.float32(x))


def _f32_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=np.float32)
    return a.reshape(0, 3) if a.size == 0 else a.reshape(-1, 3)


@dataclass(eq=False)
class OverlapQueryMsg:
    """64-byte overlap query: ids, a sample-count hint, and the query pose."""

    client_id: int
    keyframe_id: int
    np_hint: int
    pose: Pose

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and (self.client_id, self.keyframe_id, self.np_hint)
            == (other.client_id, other.keyframe_id, other.np_hint)
            and self.pose == other.pose
        )


@dataclass(eq=False)
class SharedMapRequestMsg(OverlapQueryMsg):
    """Same body as the overlap query under a distinct type tag."""


@dataclass(eq=False)
class OverlapResponseMsg:
    """Status bit (0: samples are REDUNDANT, 1: FRESH), spacing r, sample list."""

    status: int
    r: float
    samples: np.ndarray

    def __post_init__(self):
        self.r = _f32(self.r)
        self.samples = _f32_points(self.samples)

    def __eq__(self, other):
        return (
            isinstance(other, OverlapResponseMsg)
            and self.status == other.status
            and self.r == other.r
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(eq=False)
class PointRecord:
    id: int
    position: np.ndarray  # float32 on the wire
    descriptor: bytes = b"\x00" * 32
    observation_count: int = 1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float32).reshape(3)
        self.descriptor = bytes(self.descriptor)[:32].ljust(32, b"\x00")

    def __eq__(self, other):
        return (
            isinstance(other, PointRecord)
            and self.id == other.id
            and self.observation_count == other.observation_count
            and self.descriptor == other.descriptor
            and np.array_equal(self.position, other.position)
        )


@dataclass(eq=False)
class KeyframeUploadMsg:
    client_id: int
    keyframe_id: int
    pose: Pose
    fov: float
    points: list[PointRecord] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, KeyframeUploadMsg)
            and (self.client_id, self.keyframe_id, self.fov)
            == (other.client_id, other.keyframe_id, other.fov)
            and self.pose == other.pose
            and self.points == other.points
        )


@dataclass(eq=False)
class FrameRecord:
    frame_id: int
    client_id: int
    keyframe_id: int
    pose: Pose
    fov: float
    point_ids: np.ndarray

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)

    def __eq__(self, other):
        return (
            isinstance(other, FrameRecord)
            and (self.frame_id, self.client_id, self.keyframe_id, self.fov)
            == (other.frame_id, other.client_id, other.keyframe_id, other.fov)
            and self.pose == other.pose
            and np.array_equal(self.point_ids, other.point_ids)
        )


@dataclass(eq=False)
class SharedMapResponseMsg:
    """Frames intersecting the shared cone plus a deduplicated point table."""

    frames: list[FrameRecord] = field(default_factory=list)
    points: list[PointRecord] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, SharedMapResponseMsg)
            and self.frames == other.frames
            and self.points == other.points
        )

    @property
    def empty(self) -> bool:
        return not self.frames and not self.points


@dataclass(frozen=True)
class SessionRegisterMsg:
    client_id: int
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class SessionEndMsg:
    client_id: int


@dataclass(eq=False)
class UpdateCheckMsg:
    """The device's recent keyframes, sent after repeated localization failures."""

    client_id: int
    keyframes: list[KeyframeUploadMsg] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, UpdateCheckMsg)
            and self.client_id == other.client_id
            and self.keyframes == other.keyframes
        )


VERDICT_EXPANSION = 0
VERDICT_UPDATING = 1


@dataclass(eq=False)
class UpdateStatusMsg:
    verdict: int
    stale_ids: np.ndarray
    examined: int = 0
    high_confidence: int = 0
    stale_candidates: int = 0
    cluster_count: int = 0

    def __post_init__(self):
        self.stale_ids = np.asarray(self.stale_ids, dtype=np.int64).reshape(-1)

    def __eq__(self, other):
        return (
            isinstance(other, UpdateStatusMsg)
            and (self.verdict, self.examined, self.high_confidence,
                 self.stale_candidates, self.cluster_count)
            == (other.verdict, other.examined, other.high_confidence,
                other.stale_candidates, other.cluster_count)
            and np.array_equal(self.stale_ids, other.stale_ids)
        )


@dataclass(frozen=True)
class UploadAckMsg:
    frame_id: int


@dataclass(frozen=True)
class RegisterAckMsg:
    client_id: int


@dataclass(frozen=True)
class EndAckMsg:
    frame_count: int
    point_count: int
    elapsed_seconds: float
    map_changed: bool = False


@dataclass(frozen=True)
class ErrorMsg:
    code: int
    message: str


E_MALFORMED = 1
E_PROTOCOL = 2
E_UNKNOWN_TYPE = 3
E_INTERNAL = 4


# -- payload codecs --------------------------------------------------------


def _pack_pose(p: Pose) -> bytes:
    return struct.pack("<6d", p.x, p.y, p.z, p.roll, p.pitch, p.yaw)


def _unpack_pose(data: bytes, off: int) -> tuple[Pose, int]:
    vals = struct.unpack_from("<6d", data, off)
    return Pose(*vals), off + 48


def _pack_point(p: PointRecord) -> bytes:
    return (
        struct.pack("<q", p.id)
        + p.position.astype("<f4").tobytes()
        + p.descriptor
        + struct.pack("<H", p.observation_count)
    )


_POINT_BYTES = 8 + 12 + 32 + 2


def _unpack_point(data: bytes, off: int) -> tuple[PointRecord, int]:
    (pid,) = struct.unpack_from("<q", data, off)
    pos = np.frombuffer(data, dtype="<f4", count=3, offset=off + 8).copy()
    desc = data[off + 20 : off + 52]
    (obs,) = struct.unpack_from("<H", data, off + 52)
    return PointRecord(pid, pos, desc, obs), off + _POINT_BYTES


def _pack_keyframe_payload(m: KeyframeUploadMsg) -> bytes:
    out = struct.pack("<II", m.client_id, m.keyframe_id)
    out += _pack_pose(m.pose)
    out += struct.pack("<dI", m.fov, len(m.points))
    return out + b"".join(_pack_point(p) for p in m.points)


def _unpack_keyframe_payload(data: bytes, off: int) -> tuple[KeyframeUploadMsg, int]:
    client_id, keyframe_id = struct.unpack_from("<II", data, off)
    pose, off2 = _unpack_pose(data, off + 8)
    fov, n = struct.unpack_from("<dI", data, off2)
    off2 += 12
    points = []
    for _ in range(n):
        p, off2 = _unpack_point(data, off2)
        points.append(p)
    return KeyframeUploadMsg(client_id, keyframe_id, pose, fov, points), off2


def _encode_payload(msg) -> bytes:
    if isinstance(msg, OverlapResponseMsg):
        return (
            struct.pack("<BfI", msg.status, msg.r, len(msg.samples))
            + msg.samples.astype("<f4").tobytes()
        )
    if isinstance(msg, KeyframeUploadMsg):
        return _pack_keyframe_payload(msg)
    if isinstance(msg, SharedMapResponseMsg):
        out = struct.pack("<II", len(msg.frames), len(msg.points))
        for f in msg.frames:
            out += struct.pack("<qII", f.frame_id, f.client_id, f.keyframe_id)
            out += _pack_pose(f.pose)
            out += struct.pack("<dI", f.fov, len(f.point_ids))
            out += f.point_ids.astype("<i8").tobytes()
        return out + b"".join(_pack_point(p) for p in msg.points)
    if isinstance(msg, SessionRegisterMsg):
        i = msg.intrinsics
        return struct.pack("<I4d", msg.client_id, i.fx, i.fy, i.cx, i.cy)
    if isinstance(msg, SessionEndMsg):
        return struct.pack("<I", msg.client_id)
    if isinstance(msg, UpdateCheckMsg):
        out = struct.pack("<IH", msg.client_id, len(msg.keyframes))
        for kf in msg.keyframes:
            payload = _pack_keyframe_payload(kf)
            out += struct.pack("<I", len(payload)) + payload
        return out
    if isinstance(msg, UpdateStatusMsg):
        return (
            struct.pack(
                "<BIIIII",
                msg.verdict,
                msg.examined,
                msg.high_confidence,
                msg.stale_candidates,
                msg.cluster_count,
                len(msg.stale_ids),
            )
            + msg.stale_ids.astype("<i8").tobytes()
        )
    if isinstance(msg, UploadAckMsg):
        return struct.pack("<q", msg.frame_id)
    if isinstance(msg, RegisterAckMsg):
        return struct.pack("<I", msg.client_id)
    if isinstance(msg, EndAckMsg):
        return struct.pack(
            "<IIdB",
            msg.frame_count,
            msg.point_count,
            msg.elapsed_seconds,
            int(msg.map_changed),
        )
    if isinstance(msg, ErrorMsg):
        raw = msg.message.encode("utf-8")
        return struct.pack("<HH", msg.code, len(raw)) + raw
    raise TypeError(f"cannot encode {type(msg).__name__}")


_TYPE_OF = {
    OverlapQueryMsg: T_OVERLAP_QUERY,
    SharedMapRequestMsg: T_SHARED_MAP_REQUEST,
    OverlapResponseMsg: T_OVERLAP_RESPONSE,
    KeyframeUploadMsg: T_KEYFRAME_UPLOAD,
    SharedMapResponseMsg: T_SHARED_MAP_RESPONSE,
    SessionRegisterMsg: T_SESSION_REGISTER,
    SessionEndMsg: T_SESSION_END,
    UpdateCheckMsg: T_UPDATE_CHECK,
    UpdateStatusMsg: T_UPDATE_STATUS,
    UploadAckMsg: T_UPLOAD_ACK,
    RegisterAckMsg: T_REGISTER_ACK,
    EndAckMsg: T_END_ACK,
    ErrorMsg: T_ERROR,
}


def message_type(msg) -> int:
    # Subclass check must run before the base OverlapQueryMsg lookup.
    if isinstance(msg, SharedMapRequestMsg):
        return T_SHARED_MAP_REQUEST
    return _TYPE_OF[type(msg)]


def encode(msg) -> bytes:
    """Encode one message as a framed byte string."""
    mtype = message_type(msg)
    if mtype in FIXED_TYPES:
        body = _FIXED_BODY.pack(
            msg.client_id, msg.keyframe_id, msg.np_hint,
            msg.pose.x, msg.pose.y, msg.pose.z,
            msg.pose.roll, msg.pose.pitch, msg.pose.yaw,
        )
        frame = _FIXED_PREFIX.pack(MAGIC, VERSION, mtype) + body + b"\x00\x00"
        assert len(frame) == QUERY_FRAME_SIZE
        return frame
    payload = _encode_payload(msg)
    return _VAR_HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def frame_length(prefix: bytes) -> int:
    """Total frame size implied by the first 8 bytes (4 suffice for fixed types)."""
    if len(prefix) < 4:
        raise DecodeError("frame shorter than the 4-byte prefix", len(prefix))
    magic, version, mtype = _FIXED_PREFIX.unpack_from(prefix, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic 0x{magic:04X}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 2)
    if mtype in FIXED_TYPES:
        return QUERY_FRAME_SIZE
    if len(prefix) < 8:
        raise DecodeError("variable frame shorter than its 8-byte header", len(prefix))
    (length,) = struct.unpack_from("<I", prefix, 4)
    return 8 + length


def decode(data: bytes):
    """Decode exactly one frame; raises DecodeError with the failing offset."""
    total = frame_length(data[:8])
    if len(data) < total:
        raise DecodeError(f"truncated frame: need {total} bytes, have {len(data)}", len(data))
    if len(data) > total:
        raise DecodeError("trailing bytes after frame", total)
    mtype = data[3]
    try:
        if mtype in FIXED_TYPES:
            client_id, keyframe_id, np_hint, *pose_vals = _FIXED_BODY.unpack_from(data, 4)
            cls = OverlapQueryMsg if mtype == T_OVERLAP_QUERY else SharedMapRequestMsg
            return cls(client_id, keyframe_id, np_hint, Pose(*pose_vals))
        payload = data[8:]
        if mtype == T_OVERLAP_RESPONSE:
            status, r, n = struct.unpack_from("<BfI", payload, 0)
            if len(payload) != 9 + 12 * n:
                raise DecodeError("sample list length mismatch", 8 + len(payload))
            pts = np.frombuffer(payload, dtype="<f4", count=3 * n, offset=9)
            return OverlapResponseMsg(status, r, pts.reshape(n, 3).copy())
        if mtype == T_KEYFRAME_UPLOAD:
            msg, _ = _unpack_keyframe_payload(payload, 0)
            return msg
        if mtype == T_SHARED_MAP_RESPONSE:
            n_frames, n_points = struct.unpack_from("<II", payload, 0)
            off = 8
            frames = []
            for _ in range(n_frames):
                fid, client_id, keyframe_id = struct.unpack_from("<qII", payload, off)
                pose, off2 = _unpack_pose(payload, off + 16)
                fov, n_ids = struct.unpack_from("<dI", payload, off2)
                off2 += 12
                ids = np.frombuffer(payload, dtype="<i8", count=n_ids, offset=off2).copy()
                off = off2 + 8 * n_ids
                frames.append(FrameRecord(fid, client_id, keyframe_id, pose, fov, ids))
            points = []
            for _ in range(n_points):
                p, off = _unpack_point(payload, off)
                points.append(p)
            return SharedMapResponseMsg(frames, points)
        if mtype == T_SESSION_REGISTER:
            client_id, fx, fy, cx, cy = struct.unpack_from("<I4d", payload, 0)
            return SessionRegisterMsg(client_id, CameraIntrinsics(fx, fy, cx, cy))
        if mtype == T_SESSION_END:
            (client_id,) = struct.unpack_from("<I", payload, 0)
            return SessionEndMsg(client_id)
        if mtype == T_UPDATE_CHECK:
            client_id, n = struct.unpack_from("<IH", payload, 0)
            off = 6
            kfs = []
            for _ in range(n):
                (length,) = struct.unpack_from("<I", payload, off)
                kf, _ = _unpack_keyframe_payload(payload[off + 4 : off + 4 + length], 0)
                kfs.append(kf)
                off += 4 + length
            return UpdateCheckMsg(client_id, kfs)
        if mtype == T_UPDATE_STATUS:
            verdict, examined, high, cand, clusters, n = struct.unpack_from("<BIIIII", payload, 0)
            ids = np.frombuffer(payload, dtype="<i8", count=n, offset=21).copy()
            return UpdateStatusMsg(verdict, ids, examined, high, cand, clusters)
        if mtype == T_UPLOAD_ACK:
            return UploadAckMsg(*struct.unpack_from("<q", payload, 0))
        if mtype == T_REGISTER_ACK:
            return RegisterAckMsg(*struct.unpack_from("<I", payload, 0))
        if mtype == T_END_ACK:
            frames, points, elapsed, changed = struct.unpack_from("<IIdB", payload, 0)
            return EndAckMsg(frames, points, elapsed, bool(changed))
        if mtype == T_ERROR:
            code, n = struct.unpack_from("<HH", payload, 0)
            return ErrorMsg(code, payload[4 : 4 + n].decode("utf-8"))
    except (struct.error, ValueError) as e:
        if isinstance(e, DecodeError):
            raise
        raise DecodeError(f"malformed payload for type {mtype}: {e}", 8) from e
    raise DecodeError(f"unknown message type {mtype}", 3)


# -- traffic metering -------------------------------------------------------

CATEGORY_OF_TYPE = {
    T_OVERLAP_QUERY: "query",
    T_OVERLAP_RESPONSE: "response",
    T_KEYFRAME_UPLOAD: "keyframe_upload",
    T_SHARED_MAP_REQUEST: "shared_map",
    T_SHARED_MAP_RESPONSE: "shared_map",
    T_SESSION_REGISTER: "session",
    T_SESSION_END: "session",
    T_UPDATE_CHECK: "update_check",
    T_UPDATE_STATUS: "update_check",
    T_UPLOAD_ACK: "ack",
    T_REGISTER_ACK: "ack",
    T_END_ACK: "ack",
    T_ERROR: "error",
}


@dataclass
class TrafficStats:
    """Per-session byte accounting by direction and message category."""

    upload_bytes: dict[str, int] = field(default_factory=dict)
    download_bytes: dict[str, int] = field(default_factory=dict)
    upload_msgs: dict[str, int] = field(default_factory=dict)
    download_msgs: dict[str, int] = field(default_factory=dict)
    keyframes: int = 0

    def note_keyframe(self):
        self.keyframes += 1

    @property
    def total_upload(self) -> int:
        return sum(self.upload_bytes.values())

    @property
    def total_download(self) -> int:
        return sum(self.download_bytes.values())

    def category_bytes(self, category: str) -> int:
        return self.upload_bytes.get(category, 0) + self.download_bytes.get(category, 0)

    def per_keyframe_kb(self, category: str | None = None, direction: str = "upload") -> float:
        if self.keyframes == 0:
            return 0.0
        buckets = self.upload_bytes if direction == "upload" else self.download_bytes
        total = buckets.get(category, 0) if category else sum(buckets.values())
        return total / self.keyframes / 1024.0

    def ratio_vs_full_keyframe(self, category: str, direction: str = "upload") -> float:
        """Mean per-keyframe bytes of a category over the 160 KB constant."""
        if self.keyframes == 0:
            return 0.0
        buckets = self.upload_bytes if direction == "upload" else self.download_bytes
        return buckets.get(category, 0) / self.keyframes / FULL_KEYFRAME_BYTES

    def merge(self, other: "TrafficStats"):
        for src, dst in (
            (other.upload_bytes, self.upload_bytes),
            (other.download_bytes, self.download_bytes),
            (other.upload_msgs, self.upload_msgs),
            (other.download_msgs, self.download_msgs),
        ):
            for k, v in src.items():
                dst[k] = dst.get(k, 0) + v
        self.keyframes += other.keyframes


def meter(stats: TrafficStats, msg, direction: str, size: int | None = None) -> TrafficStats:
    """Accumulate one message's encoded size under its category."""
    if direction not in ("upload", "download"):
        raise ValueError(f"direction must be upload or download, got {direction}")
    category = CATEGORY_OF_TYPE[message_type(msg)]
    nbytes = len(encode(msg)) if size is None else size
    buckets = stats.upload_bytes if direction == "upload" else stats.download_bytes
    counts = stats.upload_msgs if direction == "upload" else stats.download_msgs
    buckets[category] = buckets.get(category, 0) + nbytes
    counts[category] = counts.get(category, 0) + 1
    return stats
