"""Deployable shell: the message-dispatching map server, duplex transports
(in-process and TCP) with optional token-bucket throttling, and the client
pipeline that drives the device protocol over a keyframe stream."""

from __future__ import annotations

import enum
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .expansion import (
    Keyframe,
    RigidTransform,
    build_response,
    estimate_alignment,
    inject_redundancy,
    integrate_upload,
    on_session_end,
    partition_keyframe,
)
from .geometry import CameraIntrinsics, compute_fov
from .mapstore import GlobalMap, audit
from .overlap import assess_overlap, overlap_from_response
from .params import DEFAULT_PARAMS, ProtocolParams
from .sharing import (
    DeviceAction,
    DeviceLoopState,
    build_shared_map,
    get_update_status,
    run_device_loop,
)
from . import wire
from .wire import (
    DecodeError,
    ErrorMsg,
    KeyframeUploadMsg,
    OverlapQueryMsg,
    RegisterAckMsg,
    EndAckMsg,
    SessionEndMsg,
    SessionRegisterMsg,
    SharedMapRequestMsg,
    SharedMapResponseMsg,
    TrafficStats,
    UpdateCheckMsg,
    UploadAckMsg,
    decode,
    encode,
    frame_length,
    meter,
)


class ProtocolError(Exception):
    """Message violates the session protocol; the session is aborted."""


class TransportError(Exception):
    """The transport failed to deliver a frame."""


class SessionState(enum.Enum):
    REGISTERED = "registered"
    MAPPING = "mapping"
    SHARING = "sharing"
    ENDED = "ended"


class RWLock:
    """Multiple concurrent readers, one exclusive writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    def acquire_read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True

    def release_write(self):
        with self._cond:
            self._writing = False
            self._cond.notify_all()

    class _Guard:
        def __init__(self, lock, write):
            self._lock, self._write = lock, write

        def __enter__(self):
            (self._lock.acquire_write if self._write else self._lock.acquire_read)()

        def __exit__(self, *exc):
            (self._lock.release_write if self._write else self._lock.release_read)()

    def reading(self):
        return RWLock._Guard(self, False)

    def writing(self):
        return RWLock._Guard(self, True)


_ALIGN_MIN_PAIRS = 10


@dataclass
class Session:
    """Server-side per-client state."""

    client_id: int
    intrinsics: CameraIntrinsics
    fov: float
    alpha: float
    state: SessionState = SessionState.REGISTERED
    traffic: TrafficStats = field(default_factory=TrafficStats)
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    aligned: bool = False
    overlap_degrees: list = field(default_factory=list)
    keyframes_seen: int = 0

    def transition(self, to: SessionState):
        if self.state is SessionState.ENDED:
            raise ProtocolError(f"client {self.client_id} session already ended")
        self.state = to


def _derive_seed(base: int, client_id: int, keyframe_id: int) -> int:
    # Stable across transports and runs for a fixed server seed.
    return (base * 1000003 + client_id * 8191 + keyframe_id) & 0x7FFFFFFF


class MapServer:
    """Dispatches protocol messages onto the map engine.

    Reads run concurrently; map writes are serialized by a single lock
    (single-writer / multi-reader via the GIL for array reads plus an
    exclusive mutation lock).
    """

    def __init__(
        self,
        map: GlobalMap,
        params: ProtocolParams = DEFAULT_PARAMS,
        seed: int = 0,
        auto_align: bool = False,
        optimization_hook=None,
    ):
        self.map = map
        self.params = params
        self.seed = seed
        self.auto_align = auto_align
        self.optimization_hook = optimization_hook
        self.sessions: dict[int, Session] = {}
        self.alpha_overrides: dict[int, float] = {}
        self.ingress_bytes = 0
        self.egress_bytes = 0
        self.latencies: dict[str, list[float]] = {}
        self.reports = []
        self._map_lock = RWLock()
        self._session_lock = threading.Lock()
        self._stats_lock = threading.Lock()

    # -- message handling -------------------------------------------------

    def handle_bytes(self, raw: bytes) -> bytes:
        """Decode, dispatch, and encode; errors become error frames."""
        with self._stats_lock:
            self.ingress_bytes += len(raw)
        try:
            msg = decode(raw)
        except DecodeError as e:
            reply = ErrorMsg(wire.E_MALFORMED, str(e))
            out = encode(reply)
            with self._stats_lock:
                self.egress_bytes += len(out)
            return out
        t0 = time.perf_counter()
        try:
            reply = self.handle(msg)
        except ProtocolError as e:
            reply = ErrorMsg(wire.E_PROTOCOL, str(e))
        except Exception as e:  # pragma: no cover - defensive
            reply = ErrorMsg(wire.E_INTERNAL, f"{type(e).__name__}: {e}")
        self._note_latency(type(msg).__name__, time.perf_counter() - t0)
        session = self.sessions.get(getattr(msg, "client_id", -1))
        if session is not None:
            meter(session.traffic, msg, "upload", size=len(raw))
        out = encode(reply)
        if session is not None:
            meter(session.traffic, reply, "download", size=len(out))
        with self._stats_lock:
            self.egress_bytes += len(out)
        return out

    def _note_latency(self, op: str, seconds: float):
        with self._stats_lock:
            self.latencies.setdefault(op, []).append(seconds)

    def _session(self, client_id: int) -> Session:
        session = self.sessions.get(client_id)
        if session is None:
            raise ProtocolError(f"client {client_id} is not registered")
        if session.state is SessionState.ENDED:
            raise ProtocolError(f"client {client_id} session already ended")
        return session

    def handle(self, msg):
        if isinstance(msg, SessionRegisterMsg):
            return self._on_register(msg)
        if isinstance(msg, SharedMapRequestMsg):
            return self._on_shared_map_request(msg)
        if isinstance(msg, OverlapQueryMsg):
            return self._on_overlap_query(msg)
        if isinstance(msg, KeyframeUploadMsg):
            return self._on_upload(msg)
        if isinstance(msg, UpdateCheckMsg):
            return self._on_update_check(msg)
        if isinstance(msg, SessionEndMsg):
            return self._on_end(msg)
        raise ProtocolError(f"no handler for {type(msg).__name__}")

    def _on_register(self, msg: SessionRegisterMsg) -> RegisterAckMsg:
        with self._session_lock:
            existing = self.sessions.get(msg.client_id)
            if existing is not None and existing.state is not SessionState.ENDED:
                raise ProtocolError(f"client {msg.client_id} already registered")
            self.sessions[msg.client_id] = Session(
                client_id=msg.client_id,
                intrinsics=msg.intrinsics,
                fov=compute_fov(msg.intrinsics),
                alpha=self.alpha_overrides.get(msg.client_id, self.params.alpha),
            )
        return RegisterAckMsg(msg.client_id)

    def _assess(self, session: Session, msg) -> tuple:
        k = msg.np_hint if msg.np_hint > 0 else self.params.np_default
        seed = _derive_seed(self.seed, msg.client_id, msg.keyframe_id)
        verdict = assess_overlap(
            self.map, msg.pose, session.fov, k, seed, params=self.params,
            exclude_client=msg.client_id,
        )
        session.overlap_degrees.append(verdict.overlap_degree)
        return verdict, seed

    def _on_overlap_query(self, msg: OverlapQueryMsg):
        session = self._session(msg.client_id)
        session.transition(SessionState.MAPPING)
        session.keyframes_seen += 1
        with self._map_lock.reading():
            verdict, _ = self._assess(session, msg)
        return build_response(verdict)

    def _on_shared_map_request(self, msg: SharedMapRequestMsg):
        session = self._session(msg.client_id)
        session.transition(SessionState.SHARING)
        with self._map_lock.reading():
            verdict, _ = self._assess(session, msg)
            if not verdict.seen:
                return SharedMapResponseMsg()
            slice_ = build_shared_map(
                self.map,
                msg.pose,
                session.fov,
                session.alpha,
                client_id=msg.client_id,
                keyframe_id=msg.keyframe_id,
                params=self.params,
                exclude_client=msg.client_id,
            )
        return slice_.to_response()

    def _on_upload(self, msg: KeyframeUploadMsg) -> UploadAckMsg:
        session = self._session(msg.client_id)
        session.transition(SessionState.MAPPING)
        with self._map_lock.writing():
            if self.auto_align and not session.aligned:
                self._try_align(session, msg)
            fid = integrate_upload(self.map, msg, session.transform)
        return UploadAckMsg(fid)

    def _try_align(self, session: Session, msg: KeyframeUploadMsg):
        """Estimate the client-to-global transform from shared landmark ids."""
        pairs = []
        for p in msg.points:
            mp = self.map.points.get(p.id)
            if mp is not None:
                pairs.append((np.asarray(p.position, dtype=np.float64), mp.position))
        if len(self.map.points) == 0:
            # First contributor defines the global frame.
            session.aligned = True
            return
        if len(pairs) >= _ALIGN_MIN_PAIRS:
            est = estimate_alignment(pairs)
            session.transform = est.transform
            session.aligned = True

    def _on_update_check(self, msg: UpdateCheckMsg):
        session = self._session(msg.client_id)
        if not msg.keyframes:
            raise ProtocolError("update check carries no keyframes")
        with self._map_lock.reading():
            status = get_update_status(self.map, msg.keyframes, params=self.params)
        return status.to_msg()

    def _on_end(self, msg: SessionEndMsg) -> EndAckMsg:
        session = self._session(msg.client_id)
        with self._map_lock.writing():
            report = on_session_end(self.map, msg.client_id, self.optimization_hook)
        self.reports.append(report)
        session.state = SessionState.ENDED
        return EndAckMsg(
            frame_count=report.frame_count,
            point_count=report.point_count,
            elapsed_seconds=report.elapsed_seconds,
            map_changed=report.map_changed,
        )

    # -- metrics -----------------------------------------------------------

    def audit(self) -> list[str]:
        return audit(self.map)

    def latency_percentiles(self) -> dict[str, dict[str, float]]:
        out = {}
        for op, vals in self.latencies.items():
            arr = np.asarray(vals)
            out[op] = {
                "p50_ms": float(np.percentile(arr, 50) * 1e3),
                "p95_ms": float(np.percentile(arr, 95) * 1e3),
                "count": int(len(arr)),
            }
        return out


# -- transports --------------------------------------------------------------


class TokenBucket:
    """Blocking token bucket; shared instances enforce a combined cap."""

    def __init__(self, rate_bytes_per_sec: float, capacity: float | None = None):
        if rate_bytes_per_sec <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bytes_per_sec)
        self.capacity = float(capacity) if capacity else max(self.rate * 0.1, 4096.0)
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def consume(self, n: int):
        # Debt-based: take the tokens immediately and sleep off any deficit,
        # so frames larger than the burst capacity still pass (slowly).
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
            self._stamp = now
            self._tokens -= n
            wait = -self._tokens / self.rate if self._tokens < 0 else 0.0
        if wait > 0:
            time.sleep(wait)


class InProcTransport:
    """Direct transport: frames are handed to the server in the caller's thread."""

    def __init__(self, server: MapServer, bucket: TokenBucket | None = None):
        self.server = server
        self.bucket = bucket
        self.sent_bytes = 0
        self.received_bytes = 0

    def request(self, raw: bytes) -> bytes:
        if self.bucket is not None:
            self.bucket.consume(len(raw))
        self.sent_bytes += len(raw)
        reply = self.server.handle_bytes(raw)
        if self.bucket is not None:
            self.bucket.consume(len(reply))
        self.received_bytes += len(reply)
        return reply

    def close(self):
        pass


def _read_frame(sock: socket.socket) -> bytes:
    """Read exactly one frame (fixed 64-byte or variable-length)."""

    def read_exact(n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise TransportError("connection closed mid-frame")
            buf += chunk
        return buf

    head = read_exact(4)
    if head[3] in wire.FIXED_TYPES:
        return head + read_exact(wire.QUERY_FRAME_SIZE - 4)
    head += read_exact(4)
    total = frame_length(head)
    return head + read_exact(total - 8)


class TcpTransport:
    """Client side of the TCP transport; one request/response at a time."""

    def __init__(self, addr: tuple[str, int], bucket: TokenBucket | None = None, timeout: float = 10.0):
        self.addr = addr
        self.bucket = bucket
        self.timeout = timeout
        self.sent_bytes = 0
        self.received_bytes = 0
        self._sock: socket.socket | None = None

    def _connect(self):
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def request(self, raw: bytes) -> bytes:
        try:
            self._connect()
            if self.bucket is not None:
                self.bucket.consume(len(raw))
            self._sock.sendall(raw)
            self.sent_bytes += len(raw)
            reply = _read_frame(self._sock)
            if self.bucket is not None:
                self.bucket.consume(len(reply))
            self.received_bytes += len(reply)
            return reply
        except (OSError, TransportError) as e:
            self.close()
            raise TransportError(str(e)) from e

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def throttle(transport, cap_bytes_per_sec: float):
    """Attach token-bucket pacing to an existing transport."""
    if cap_bytes_per_sec <= 0:
        raise ValueError("bandwidth cap must be positive")
    transport.bucket = TokenBucket(cap_bytes_per_sec)
    return transport


class TcpMapServer:
    """Threaded TCP front end over a MapServer; same framing as in-process."""

    def __init__(self, server: MapServer, host: str = "127.0.0.1", port: int = 0):
        self.server = server
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.addr = self._listener.getsockname()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._accept_thread: threading.Thread | None = None

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket):
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(30.0)
        try:
            while not self._stop.is_set():
                try:
                    raw = _read_frame(conn)
                except TransportError:
                    break
                conn.sendall(self.server.handle_bytes(raw))
        except OSError:
            pass
        finally:
            conn.close()

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(map: GlobalMap, host: str = "127.0.0.1", port: int = 0, **kwargs) -> TcpMapServer:
    """Bind a TCP listener over a fresh MapServer for the given map."""
    return TcpMapServer(MapServer(map, **kwargs), host, port).start()


# -- client pipeline ----------------------------------------------------------


class SessionAborted(Exception):
    """Raised when the transport failed repeatedly or the server aborted us."""


class ClientLink:
    """Encode/meter/decode wrapper with a bounded retry policy."""

    RETRIES = 3

    def __init__(self, transport, stats: TrafficStats, trace: list):
        self.transport = transport
        self.stats = stats
        self.trace = trace

    def send(self, msg):
        raw = encode(msg)
        meter(self.stats, msg, "upload", size=len(raw))
        last_error = None
        for _ in range(self.RETRIES):
            try:
                reply_raw = self.transport.request(raw)
                break
            except TransportError as e:
                last_error = e
        else:
            raise SessionAborted(f"transport failed after {self.RETRIES} attempts: {last_error}")
        reply = decode(reply_raw)
        meter(self.stats, reply, "download", size=len(reply_raw))
        if isinstance(reply, ErrorMsg):
            if reply.code == wire.E_PROTOCOL:
                raise SessionAborted(f"server aborted session: {reply.message}")
            self.trace.append({"event": "server_error", "code": reply.code, "message": reply.message})
        return reply


@dataclass
class ClientConfig:
    client_id: int
    intrinsics: CameraIntrinsics
    mode: str = "mapxx"  # or "vanilla"
    alpha: float | None = None
    params: ProtocolParams = DEFAULT_PARAMS

    def __post_init__(self):
        if self.mode not in ("mapxx", "vanilla"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ClientResult:
    client_id: int
    trace: list
    stats: TrafficStats
    overlap_degrees: list
    keyframes: int = 0
    uploads: int = 0
    update_events: list = field(default_factory=list)
    aborted: bool = False
    end_ack: EndAckMsg | None = None

    @property
    def freshness(self) -> float:
        if not self.overlap_degrees:
            return 1.0
        return 1.0 - float(np.mean(self.overlap_degrees))

    @property
    def keyframe_payload_bytes(self) -> int:
        return self.stats.upload_bytes.get("keyframe_upload", 0) + self.stats.upload_bytes.get(
            "update_check", 0
        )

    @property
    def map_requests(self) -> int:
        return sum(1 for ev in self.trace if ev.get("event") == "shared_map_request")


def client_pipeline(cfg: ClientConfig, keyframes, transport) -> ClientResult:
    """Drive the device protocol over a stream of observed keyframes.

    mapxx mode sends the 64-byte overlap query per keyframe and branches:
    seen poses move to the shared-map loop, unseen ones partition, inject,
    and upload. Vanilla mode uploads every keyframe unconditionally.
    """
    params = cfg.params
    trace: list = []
    stats = TrafficStats()
    result = ClientResult(cfg.client_id, trace, stats, overlap_degrees=[])
    link = ClientLink(transport, stats, trace)
    fov = compute_fov(cfg.intrinsics)
    state = DeviceLoopState(
        client_id=cfg.client_id,
        fov=fov,
        link=link,
        params=params,
        alpha=cfg.alpha,
        trace=trace,
    )

    def upload(kf: Keyframe):
        msg = kf.to_upload_msg(cfg.client_id)
        reply = link.send(msg)
        if isinstance(reply, UploadAckMsg):
            result.uploads += 1
            trace.append(
                {
                    "event": "upload",
                    "keyframe_id": kf.keyframe_id,
                    "points": len(kf),
                    "frame_id": reply.frame_id,
                }
            )

    try:
        reply = link.send(SessionRegisterMsg(cfg.client_id, cfg.intrinsics))
        if not isinstance(reply, RegisterAckMsg):
            raise SessionAborted(f"registration rejected: {reply}")
        sharing = False
        for kf in keyframes:
            result.keyframes += 1
            stats.note_keyframe()
            state.note_keyframe(kf.to_upload_msg(cfg.client_id))
            trace.append(
                {
                    "event": "keyframe",
                    "keyframe_id": kf.keyframe_id,
                    "points": len(kf),
                }
            )

            if cfg.mode == "vanilla":
                upload(kf)
                continue

            if sharing and state.has_slice():
                outcome = state.localize_on_slice(kf.positions)
                trace.append(
                    {
                        "event": "localize_local",
                        "keyframe_id": kf.keyframe_id,
                        "matched": outcome.matched_count,
                        "success": outcome.success,
                    }
                )
                if outcome.success:
                    result.overlap_degrees.append(1.0)
                    continue
                action = run_device_loop(state, kf.keyframe_id, kf.pose, kf.positions)
                if action in (DeviceAction.CONTINUE_ON_SHARED_MAP, DeviceAction.UPDATE_DETECTED):
                    result.overlap_degrees.append(1.0)
                    continue
                sharing = False  # fall through to the expansion path

            query = OverlapQueryMsg(cfg.client_id, kf.keyframe_id, len(kf), kf.pose)
            resp = link.send(query)
            if not isinstance(resp, wire.OverlapResponseMsg):
                continue
            k = len(kf) if len(kf) > 0 else params.np_default
            degree = overlap_from_response(resp.status, len(resp.samples), k)
            result.overlap_degrees.append(degree)
            trace.append(
                {
                    "event": "overlap_response",
                    "keyframe_id": kf.keyframe_id,
                    "status": resp.status,
                    "listed": len(resp.samples),
                    "degree": round(degree, 6),
                }
            )
            if degree > params.t_seen:
                action = run_device_loop(state, kf.keyframe_id, kf.pose, kf.positions)
                if action in (DeviceAction.CONTINUE_ON_SHARED_MAP, DeviceAction.UPDATE_DETECTED):
                    sharing = True
                    continue
                sharing = False
            pruned = partition_keyframe(kf, resp)
            final = inject_redundancy(pruned, kf)
            injected_ids = sorted(
                set(final.landmark_ids.tolist()) - set(pruned.landmark_ids.tolist())
            )
            trace.append(
                {
                    "event": "partition",
                    "keyframe_id": kf.keyframe_id,
                    "kept": len(pruned),
                    "injected": len(final) - len(pruned),
                    "injected_ids": injected_ids,
                }
            )
            upload(final)

        reply = link.send(SessionEndMsg(cfg.client_id))
        if isinstance(reply, EndAckMsg):
            result.end_ack = reply
            trace.append(
                {
                    "event": "session_end",
                    "frames": reply.frame_count,
                    "points": reply.point_count,
                }
            )
    except SessionAborted as e:
        result.aborted = True
        trace.append({"event": "aborted", "reason": str(e)})
    result.update_events = list(state.update_events)
    return result
