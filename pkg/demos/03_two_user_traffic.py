"""Traffic reduction when a follower retraces a mapped trajectory.

Runs the canonical two-user corridor in protocol mode and as the vanilla
baseline (every keyframe uploaded), then prints the freshness/traffic table.
The follower's keyframe payload collapses to (near) zero because the server
serves it shared map slices instead of requesting uploads.
"""

import numpy as np

from comap import CAMERA_PRESETS, ProtocolParams, run_scenario, vanilla_twin
from comap.scenario import ScenarioConfig, UserSpec, freshness_traffic_report, render_report
from comap.sim import TrajectorySpec

intr = CAMERA_PRESETS["sim_752x480"]
traj = TrajectorySpec(waypoints=[(0.0, 0.0, 1.5, 0.0), (80.0, 0.0, 1.5, 0.0)], d_kf=2.0)
cfg = ScenarioConfig(
    seed=3,
    scene_seed=11,
    bounds=np.array([[-25.0, -30.0, -18.0], [105.0, 30.0, 22.0]]),
    landmark_count=20000,
    users=[
        UserSpec(client_id=1, intrinsics=intr, trajectory=traj, role="mapper"),
        UserSpec(client_id=2, intrinsics=intr, trajectory=traj, role="follower", alpha=1.3),
    ],
    params=ProtocolParams(),
)

metrics = run_scenario(cfg)
vanilla = run_scenario(vanilla_twin(cfg))
print(render_report(freshness_traffic_report(metrics, vanilla)))

u2 = metrics.user(2)
print(f"follower: {u2.keyframes} keyframes, {u2.map_requests} shared-map requests, "
      f"{u2.keyframe_payload_bytes} payload bytes "
      f"(vanilla twin: {vanilla.user(2).keyframe_payload_bytes})")
