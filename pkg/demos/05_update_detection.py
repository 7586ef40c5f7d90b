"""Detecting a stale map after the world changes.

Two mappers cover a corridor whose middle section is dominated by a
'cars' cluster. The cluster then leaves, and a third user replays the
path: localization against the (stale) shared map fails twice in a row,
the device submits its recent keyframes, and the server flags the
missing cluster's points as stale.
"""

import numpy as np

from comap import CAMERA_PRESETS, ProtocolParams, run_scenario
from comap.scenario import ScenarioConfig, UserSpec
from comap.sim import TrajectorySpec, generate_scene

intr = CAMERA_PRESETS["sim_752x480"]


def config(mutate):
    blobs = [
        {"label": f"blob{x}", "count": 180, "center": [float(x), 0.0, 1.5], "sigma": 3.0}
        for x in (0, 6, 12, 48, 54)
    ]
    clusters = blobs + [{"label": "cars", "count": 55, "center": [28.0, 0.0, 1.5], "sigma": 2.2}]
    traj = TrajectorySpec(waypoints=[(0.0, 0.0, 1.5, 0.0), (50.0, 0.0, 1.5, 0.0)], d_kf=2.0)
    return ScenarioConfig(
        seed=3,
        scene_seed=77,
        bounds=np.array([[-25.0, -25.0, -18.0], [79.0, 25.0, 22.0]]),
        landmark_count=sum(c["count"] for c in clusters) + 2450,
        clusters=clusters,
        users=[
            UserSpec(client_id=1, intrinsics=intr, trajectory=traj, role="mapper"),
            UserSpec(client_id=2, intrinsics=intr, trajectory=traj, role="mapper", mode="vanilla"),
            UserSpec(
                client_id=3, intrinsics=intr, trajectory=traj, role="follower",
                scene_ops=[{"op": "remove_cluster", "cluster": "cars"}] if mutate else [],
            ),
        ],
        params=ProtocolParams(),
    )


cfg = config(mutate=True)
metrics = run_scenario(cfg)
events = metrics.update_events.get(3, [])
scene = generate_scene(cfg.scene_seed, cfg.bounds, cfg.landmark_count, cfg.clusters)
cars = set(int(i) for i in scene.cluster_ids("cars"))
stale = set()
for e in events:
    stale |= set(e["stale_ids"])

print(f"mutated world: {len(events)} UPDATING verdicts")
print(f"stale ids reported: {len(stale)}; recall of removed cluster: "
      f"{len(stale & cars) / len(cars):.1%}; false ids: {len(stale - cars)}")

print("\ndevice trace around the first update check:")
trace = metrics.traces[3]
idx = next(i for i, e in enumerate(trace) if e["event"] == "update_check")
for e in trace[max(0, idx - 5): idx + 2]:
    print("  ", {k: v for k, v in e.items() if k != "injected_ids"})

clean = run_scenario(config(mutate=False))
print(f"\nunmutated world: {clean.user(3).update_events} UPDATING verdicts (expected 0)")
