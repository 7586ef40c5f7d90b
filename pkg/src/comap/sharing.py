"""Seen-location path: proactive shared-map slices, localization against a
slice, the device-initiated update-detection loop, and the server-side
staleness check."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, ViewCone, cone_from_fov, contains, contains_many
from .mapstore import GlobalMap, select_neighbors
from .params import DEFAULT_PARAMS, ProtocolParams
from .spatial import KdTree
from .wire import (
    FrameRecord,
    KeyframeUploadMsg,
    PointRecord,
    SharedMapRequestMsg,
    SharedMapResponseMsg,
    UpdateCheckMsg,
    UpdateStatusMsg,
    VERDICT_EXPANSION,
    VERDICT_UPDATING,
)


@dataclass
class SharedMapSlice:
    """A proactive slice of the global map around a query pose."""

    origin_client: int
    origin_keyframe: int
    origin_pose: Pose
    cone: ViewCone
    frames: list[FrameRecord]
    point_ids: np.ndarray
    point_positions: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.point_ids) == 0 and not self.frames

    def to_response(self) -> SharedMapResponseMsg:
        points = [
            PointRecord(
                id=int(pid),
                position=self.point_positions[i],
                observation_count=min(int(self._obs[i]), 0xFFFF) if self._obs is not None else 1,
            )
            for i, pid in enumerate(self.point_ids)
        ]
        return SharedMapResponseMsg(frames=list(self.frames), points=points)

    _obs: np.ndarray | None = None


def build_shared_map(
    map: GlobalMap,
    q: Pose,
    q_fov: float,
    alpha: float,
    client_id: int = 0,
    keyframe_id: int = 0,
    params: ProtocolParams = DEFAULT_PARAMS,
    exclude_client: int | None = None,
) -> SharedMapSlice:
    """Assemble the shared cone's map content.

    The cone is the query's view cone widened by the oversharing factor;
    shared points are exactly the map points inside it, so the oversharing
    factor directly governs how far one slice carries the device. Shared
    frame records are the owners of in-cone points plus the distance/angle
    gated neighbor frames that intersect the cone.
    """
    cone = cone_from_fov(q, q_fov, params.h, alpha)
    positions = map.point_positions
    in_cone = contains_many(cone, positions)
    in_rows = np.nonzero(in_cone)[0]

    def eligible(pid: int) -> bool:
        if exclude_client is None:
            return True
        owners = map.points[pid].owner_frames
        return any(map.frames[f].client_id != exclude_client for f in owners)

    if exclude_client is not None and len(in_rows):
        keep = [i for i, pid in enumerate(map.point_id_array[in_rows]) if eligible(int(pid))]
        in_rows = in_rows[keep] if keep else np.empty(0, dtype=np.int64)

    # Frames owning an in-cone point always intersect the cone; gated
    # neighbor frames are kept only when they do.
    frame_ids: set[int] = set()
    in_ids = set(int(i) for i in map.point_id_array[in_rows])
    for pid in in_ids:
        frame_ids.update(
            f
            for f in map.points[pid].owner_frames
            if exclude_client is None or map.frames[f].client_id != exclude_client
        )
    neighbors = select_neighbors(map, q, q_fov, params.t_d, exclude_client=exclude_client)
    for fid in neighbors.frame_ids:
        f = map.frames[fid]
        if contains(cone, f.pose.position) or any(int(i) in in_ids for i in f.ids):
            frame_ids.add(fid)

    rows = in_rows
    ids = map.point_id_array[rows]
    order = np.argsort(ids, kind="stable")
    rows, ids = rows[order], ids[order]
    id_set = set(int(i) for i in ids)

    records = []
    for fid in sorted(frame_ids):
        f = map.frames[fid]
        shared_ids = np.array(
            [int(i) for i in f.ids if int(i) in id_set], dtype=np.int64
        )
        records.append(
            FrameRecord(
                frame_id=fid,
                client_id=f.client_id,
                keyframe_id=f.keyframe_id,
                pose=f.pose,
                fov=f.fov,
                point_ids=shared_ids,
            )
        )

    slice_ = SharedMapSlice(
        origin_client=client_id,
        origin_keyframe=keyframe_id,
        origin_pose=q,
        cone=cone,
        frames=records,
        point_ids=ids.copy(),
        point_positions=positions[rows].copy(),
    )
    slice_._obs = map.point_observation_counts[rows].copy()
    return slice_


@dataclass(frozen=True)
class LocalizationOutcome:
    matched_count: int
    success: bool


def localize(
    frame_observations: np.ndarray,
    slice_points: np.ndarray,
    r_match: float,
    threshold: int = 75,
) -> LocalizationOutcome:
    """Count observations with a slice point within r_match; succeed at the threshold."""
    if r_match <= 0:
        raise ValueError(f"r_match must be positive, got {r_match}")
    obs = np.asarray(frame_observations, dtype=np.float64).reshape(-1, 3)
    pts = np.asarray(slice_points, dtype=np.float64).reshape(-1, 3)
    if not len(obs) or not len(pts):
        return LocalizationOutcome(0, False)
    matched = int(KdTree(pts).any_within(obs, r_match).sum())
    return LocalizationOutcome(matched, matched >= threshold)


class UpdateVerdict(enum.Enum):
    EXPANSION = "EXPANSION"
    UPDATING = "UPDATING"


@dataclass
class UpdateStatus:
    verdict: UpdateVerdict
    stale_point_ids: set[int]
    examined: int = 0
    high_confidence: int = 0
    stale_candidates: int = 0
    cluster_count: int = 0

    def to_msg(self) -> UpdateStatusMsg:
        return UpdateStatusMsg(
            verdict=VERDICT_UPDATING if self.verdict is UpdateVerdict.UPDATING else VERDICT_EXPANSION,
            stale_ids=np.array(sorted(self.stale_point_ids), dtype=np.int64),
            examined=self.examined,
            high_confidence=self.high_confidence,
            stale_candidates=self.stale_candidates,
            cluster_count=self.cluster_count,
        )


def _cluster_sizes(positions: np.ndarray, radius: float) -> list[int]:
    """Single-linkage component sizes with the given linking radius."""
    n = len(positions)
    if n == 0:
        return []
    tree = KdTree(positions)
    seen = np.zeros(n, dtype=bool)
    sizes = []
    for start in range(n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        size = 0
        while queue:
            i = queue.pop()
            size += 1
            for j in tree.radius_search(positions[i], radius):
                if not seen[j]:
                    seen[j] = True
                    queue.append(int(j))
        sizes.append(size)
    return sizes


def get_update_status(
    map: GlobalMap,
    kfs: list[KeyframeUploadMsg],
    k_nn: int | None = None,
    r_match: float | None = None,
    params: ProtocolParams = DEFAULT_PARAMS,
) -> UpdateStatus:
    """Decide whether repeated localization failures mean the world changed.

    High-confidence map points (observation count at or above the in-cone
    median) that no submitted keyframe re-observed within ``r_match`` are
    stale candidates; a candidate is confirmed when at least half of its
    ``k_nn`` nearest map points are also unobserved. The verdict is
    UPDATING only when enough confirmed points form a spatial cluster,
    otherwise the device is simply off the map (EXPANSION).
    """
    if not kfs:
        raise ValueError("update check needs at least one keyframe")
    k_nn = params.k_nn if k_nn is None else k_nn
    if r_match is None:
        r_match = default_r_match(kfs[0].fov, params)

    positions = map.point_positions
    counts = map.point_observation_counts
    if not len(positions):
        return UpdateStatus(UpdateVerdict.EXPANSION, set())

    high = np.zeros(len(positions), dtype=bool)
    for kf in kfs:
        cone = cone_from_fov(kf.pose, kf.fov, params.h)
        in_cone = contains_many(cone, positions)
        if not in_cone.any():
            continue
        median = float(np.median(counts[in_cone]))
        high |= in_cone & (counts >= median)

    examined = int(high.sum())
    if examined == 0:
        return UpdateStatus(UpdateVerdict.EXPANSION, set())

    obs = np.vstack(
        [np.asarray([p.position for p in kf.points], dtype=np.float64).reshape(-1, 3) for kf in kfs]
    )
    if not len(obs):
        return UpdateStatus(UpdateVerdict.EXPANSION, set(), examined=examined)
    observed = KdTree(obs).any_within(positions, r_match)

    candidate_rows = np.nonzero(high & ~observed)[0]
    map_tree = KdTree(positions)
    confirmed = []
    need = max(1, math.ceil(k_nn / 2))
    for row in candidate_rows:
        nn = map_tree.query_nearest(positions[row], k_nn + 1)
        nn = nn[nn != row][:k_nn]
        if int((~observed[nn]).sum()) >= need:
            confirmed.append(int(row))

    confirmed = np.array(confirmed, dtype=np.int64)
    sizes = _cluster_sizes(positions[confirmed], 2.0 * r_match)
    updating = (
        len(confirmed) >= params.stale_min
        and bool(sizes)
        and max(sizes) >= params.cluster_min
    )
    stale_ids = (
        set(int(i) for i in map.point_id_array[confirmed]) if updating else set()
    )
    return UpdateStatus(
        verdict=UpdateVerdict.UPDATING if updating else UpdateVerdict.EXPANSION,
        stale_point_ids=stale_ids,
        examined=examined,
        high_confidence=examined,
        stale_candidates=int(len(candidate_rows)),
        cluster_count=sum(1 for s in sizes if s >= params.cluster_min),
    )


def default_r_match(fov: float, params: ProtocolParams = DEFAULT_PARAMS) -> float:
    """Localization matching radius: half the overlap-sampling spacing."""
    cone_volume = (math.pi / 3.0) * params.h**3 * math.tan(min(fov, math.pi - 1e-6) / 2.0) ** 2
    r = (cone_volume / params.np_default) ** (1.0 / 3.0)
    return params.r_match_factor * r


class DeviceAction(enum.Enum):
    CONTINUE_ON_SHARED_MAP = "continue_on_shared_map"
    EXPAND = "expand"
    UPDATE_DETECTED = "update_detected"


@dataclass
class DeviceLoopState:
    """Per-client state for the shared-map device loop.

    ``link`` sends one protocol message and returns the server's reply.
    """

    client_id: int
    fov: float
    link: object
    params: ProtocolParams = DEFAULT_PARAMS
    alpha: float | None = None
    np_hint: int = 0
    r_match: float = 0.0
    slice_points: np.ndarray | None = None
    slice_tree: KdTree | None = None
    recent_kfs: deque = field(default_factory=lambda: deque(maxlen=5))
    trace: list = field(default_factory=list)
    update_events: list = field(default_factory=list)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = self.params.alpha
        if self.np_hint <= 0:
            self.np_hint = self.params.np_default
        if self.r_match <= 0:
            self.r_match = default_r_match(self.fov, self.params)
        self.recent_kfs = deque(self.recent_kfs, maxlen=self.params.update_window)

    def note_keyframe(self, upload_msg: KeyframeUploadMsg):
        self.recent_kfs.append(upload_msg)

    def set_slice(self, resp: SharedMapResponseMsg):
        pts = np.asarray(
            [p.position for p in resp.points], dtype=np.float64
        ).reshape(-1, 3)
        self.slice_points = pts
        self.slice_tree = KdTree(pts) if len(pts) else None

    def clear_slice(self):
        self.slice_points = None
        self.slice_tree = None

    def has_slice(self) -> bool:
        return self.slice_points is not None and len(self.slice_points) > 0

    def localize_on_slice(self, observations: np.ndarray) -> LocalizationOutcome:
        if not self.has_slice():
            return LocalizationOutcome(0, False)
        obs = np.asarray(observations, dtype=np.float64).reshape(-1, 3)
        if not len(obs):
            return LocalizationOutcome(0, False)
        matched = int(self.slice_tree.any_within(obs, self.r_match).sum())
        return LocalizationOutcome(matched, matched >= self.params.match_threshold)


def run_device_loop(
    state: DeviceLoopState,
    keyframe_id: int,
    pose: Pose,
    observations: np.ndarray,
) -> DeviceAction:
    """One round of the device-initiated update-detection loop.

    Up to ``f`` rounds of request-then-localize; an empty slice means the
    pose is off the seen map and expansion takes over. After ``f``
    consecutive localization failures the device submits its recent
    keyframes for an update check and dispatches on the verdict. What a
    map update actually does is delegated to the recorded hook events.
    """
    observations = np.asarray(observations, dtype=np.float64).reshape(-1, 3)
    # The request advertises this keyframe's map-point count so the server
    # samples at the same granularity as the matching overlap query.
    np_hint = len(observations) if len(observations) else state.np_hint
    for _ in range(state.params.f):
        request = SharedMapRequestMsg(state.client_id, keyframe_id, np_hint, pose)
        state.trace.append({"event": "shared_map_request", "keyframe_id": keyframe_id})
        resp = state.link.send(request)
        if isinstance(resp, SharedMapResponseMsg) and not resp.empty:
            state.set_slice(resp)
            outcome = state.localize_on_slice(observations)
            state.trace.append(
                {
                    "event": "localize",
                    "keyframe_id": keyframe_id,
                    "matched": outcome.matched_count,
                    "success": outcome.success,
                }
            )
            if outcome.success:
                return DeviceAction.CONTINUE_ON_SHARED_MAP
        else:
            state.clear_slice()
            state.trace.append({"event": "slice_empty", "keyframe_id": keyframe_id})
            return DeviceAction.EXPAND

    check = UpdateCheckMsg(state.client_id, list(state.recent_kfs))
    state.trace.append(
        {"event": "update_check", "keyframe_id": keyframe_id, "window": len(check.keyframes)}
    )
    status = state.link.send(check)
    if isinstance(status, UpdateStatusMsg) and status.verdict == VERDICT_UPDATING:
        state.update_events.append(
            {
                "keyframe_id": keyframe_id,
                "stale_ids": [int(i) for i in status.stale_ids],
            }
        )
        state.trace.append(
            {
                "event": "update_detected",
                "keyframe_id": keyframe_id,
                "stale_count": int(len(status.stale_ids)),
            }
        )
        return DeviceAction.UPDATE_DETECTED
    state.trace.append({"event": "update_expansion", "keyframe_id": keyframe_id})
    return DeviceAction.EXPAND


def count_map_requests(trace) -> int:
    """Number of shared-map requests recorded in a device trace."""
    return sum(1 for ev in trace if ev.get("event") == "shared_map_request")
