# %% [markdown]
# # Merging two drifting sessions
#
# Two simulated drives around the same corridor ring. The old session drifts
# little and serves as the map; the new one starts at the opposite corner
# and drifts fifteen times faster. The new keyframes are linked to the old
# ones by ICP loops and the joint graph is optimized in each of the four
# modes. Takes about a minute.

# %%
import numpy as np

from sessionmerge.keyframe import KeyframeConfig
from sessionmerge.metrics import accuracy
from sessionmerge.pipeline import F2F, M2F, PipelineConfig, merge_sessions
from sessionmerge.world_sim import SessionSpec, corridor_loop_scene, overlap_pair

scene = corridor_loop_scene()
corners = [(2.0, 2.0, 1.5), (38.0, 2.0, 1.5), (38.0, 22.0, 1.5), (2.0, 22.0, 1.5)]
o = np.array([0.37, 0.29, -0.41])


def ring(start):
    c = corners[start:] + corners[:start] + [corners[start]]
    return [tuple(np.add(p, o)) for p in c]


common = dict(speed=2.0, rate=5.0, scan_range=10.0, point_noise=0.01)
old_spec = SessionSpec(ring(0), drift_rot=2e-5, drift_trans=5e-4, seed=100, session_id=0, **common)
new_spec = SessionSpec(ring(2), drift_rot=3e-4, drift_trans=5e-3, seed=200, session_id=1, **common)
old, new, init = overlap_pair(scene, old_spec, new_spec, 0.01, 0.1)
print(f"old {len(old)} frames, new {len(new)} frames")

# %% [markdown]
# The keyframe gate uses 5 m voxels and ``tau = 0.07``; registrations are
# shared between modes so every mode sees the same loops.

# %%
kf = KeyframeConfig(l=5.0, tau=0.07, r_map=100.0)
prev = None
print(f"{'mode':5} {'loops':>7} {'ATE before':>11} {'ATE after':>10} {'AC':>8}")
for mode in ("UPGO", "FPGO", F2F, M2F):
    res = merge_sessions(old, new, init, PipelineConfig(mode, keyframe=kf), reuse=prev)
    prev = res
    world = res.origin.act(res.merged_cloud())
    ac, _ = accuracy(world, scene.closest_points(world))
    print(f"{mode:5} {res.accepted_loops:3d}/{len(res.loops):3d} {res.ate(initial=True):11.4f} {res.ate():10.4f} {ac:8.4f}")
