"""Oversharing factor sweep: wider shared cones mean fewer map requests.

A follower retraces a turning path; each shared slice carries the map
inside the (widened) view cone of the request pose. Widening the cone lets
one slice survive more of the upcoming turn, so the device asks less often.
"""

import math

import numpy as np

from comap import CAMERA_PRESETS, ProtocolParams, run_scenario
from comap.scenario import ScenarioConfig, UserSpec
from comap.sim import TrajectorySpec

intr = CAMERA_PRESETS["sim_752x480"]


def turning_path(n_legs=8, leg=8.0, turn_deg=30.0):
    pts = [(0.0, 0.0, 1.5, 0.0)]
    x = y = hd = 0.0
    for _ in range(n_legs):
        x += leg * math.cos(hd)
        y += leg * math.sin(hd)
        hd += math.radians(turn_deg)
        pts.append((x, y, 1.5, hd))
    return TrajectorySpec(waypoints=pts, d_kf=2.0)


def config(alpha):
    traj = turning_path()
    pts = np.array([w[:3] for w in traj.waypoints])
    lo = pts.min(axis=0) - [25, 25, 20]
    hi = pts.max(axis=0) + [25, 25, 22]
    return ScenarioConfig(
        seed=4,
        scene_seed=9,
        bounds=np.array([lo, hi]),
        landmark_count=int(0.05 * np.prod(hi - lo)),
        users=[
            UserSpec(client_id=1, intrinsics=intr, trajectory=traj, role="mapper"),
            UserSpec(client_id=2, intrinsics=intr, trajectory=traj, role="follower", alpha=alpha),
        ],
        params=ProtocolParams(),
    )


print(f"turning path, length {turning_path().length():.0f} m\n")
print("alpha | shared-map requests | download KB")
for alpha in (1.0, 1.1, 1.2, 1.3, 1.5, 2.0):
    u2 = run_scenario(config(alpha)).user(2)
    print(f" {alpha:.1f}  | {u2.map_requests:19d} | {u2.total_download_bytes / 1024:10.1f}")
