# %% [markdown]
# # Command-line pipeline
#
# The same merge driven through ``python -m sessionmerge``: simulate two
# sessions, gate keyframes, merge, evaluate and tabulate. All files go to a
# temporary directory, and every step is deterministic.

# %%
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp(prefix="sessionmerge-"))
(work / "scene.txt").write_text("preset corridor_loop\n")
(work / "old.txt").write_text(
    "waypoint=2.37,2.29,1.09\nwaypoint=38.37,2.29,1.09\nwaypoint=38.37,22.29,1.09\n"
    "speed=2\nrate=5\nscan_range=10\ndrift_rot=2e-5\ndrift_trans=5e-4\nseed=1\nsession_id=0\nbeams=2000\n"
)
(work / "new.txt").write_text(
    "waypoint=38.37,22.29,1.09\nwaypoint=38.37,2.29,1.09\nwaypoint=20.37,2.29,1.09\n"
    "speed=2\nrate=5\nscan_range=10\ndrift_rot=3e-4\ndrift_trans=5e-3\nseed=2\nsession_id=1\nbeams=2000\n"
)
(work / "merge.cfg").write_text("keyframe.l=5\nkeyframe.tau=0.07\nkeyframe.r_map=100\n")


def sm(*args):
    out = subprocess.run([sys.executable, "-m", "sessionmerge", *map(str, args)], cwd=work, capture_output=True, text=True)
    print(f"$ sessionmerge {' '.join(map(str, args))}  -> exit {out.returncode}")
    print(out.stdout + out.stderr, end="")
    return out.returncode


# %%
sm("simulate", "scene.txt", "old.txt", "--out", "old")
sm("simulate", "scene.txt", "new.txt", "--out", "new")
sm("filter", "new", "--config", "merge.cfg", "--out", "new_kf")
for mode in ("UPGO", "FPGO"):
    sm("merge", "old", "new", "--config", "merge.cfg", "--mode", mode, "--out", f"merge_{mode}")
    sm("eval", f"merge_{mode}", "new", "--out", f"eval_{mode}")
sm("report", "eval_UPGO", "eval_FPGO")

# %% [markdown]
# Without the prior on the first old keyframe the graph has no anchor and
# the merge exits with code 3.

# %%
(work / "ill.cfg").write_text((work / "merge.cfg").read_text() + "anchor_prior=false\n")
sm("merge", "old", "new", "--config", "ill.cfg", "--out", "ill")
print("outputs in", work)
