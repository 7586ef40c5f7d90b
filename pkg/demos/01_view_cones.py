"""View cones from camera intrinsics, and deterministic cone sampling.

Shows how each camera preset turns into a field-of-view angle, how the
oversharing factor widens the cone, and what the sampling spacing r looks
like for different sample budgets.
"""

import numpy as np

from comap import CAMERA_PRESETS, Pose, compute_fov, contains_many, make_view_cone, sample_cone

pose = Pose(0.0, 0.0, 1.5, roll=0.0, pitch=np.pi / 2, yaw=0.0)  # looking along +x

print("field of view per camera preset")
for name, intr in CAMERA_PRESETS.items():
    fov = compute_fov(intr)
    print(f"  {name:<16} fov = {fov:.4f} rad = {np.degrees(fov):6.2f} deg")

intr = CAMERA_PRESETS["sim_752x480"]
for alpha in (1.0, 1.3):
    cone = make_view_cone(pose, intr, h=20.0, alpha=alpha)
    print(f"\ncone at alpha={alpha}: fov {cone.fov:.4f} rad, "
          f"height {cone.h} m, volume {cone.volume():,.0f} m^3")

cone = make_view_cone(pose, intr, h=20.0)
for k in (100, 300, 1000):
    samples, r = sample_cone(cone, k, seed=7)
    inside = contains_many(cone, samples).all()
    d2 = np.sum((samples[:, None, :] - samples[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    mean_nn = np.sqrt(d2.min(axis=1)).mean()
    print(f"k={k:5d}: spacing r = {r:.3f} m, mean nearest-neighbor "
          f"distance = {mean_nn:.3f} m, all inside cone: {inside}")
