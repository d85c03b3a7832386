# %% [markdown]
# # Pose graphs: gauge, marginals and how errors spread
#
# UPGO weights every edge by its own derived covariance; FPGO uses one fixed
# noise per edge kind. Without a prior the graph can slide freely (six zero
# eigenvalues of the information matrix) and the optimizer refuses to run.

# %%
import numpy as np

from sessionmerge import se3
from sessionmerge.factor_graph import FPGO, LOOP, ODOMETRY, PRIOR, UPGO, IllPosedError, PoseGraph
from sessionmerge.registration import RegistrationResult
from sessionmerge.se3 import Pose

step = Pose(se3.so3_exp([0, 0, 0.2]), np.array([1.0, 0.1, 0]))


def chain(n, mode=UPGO, prior=True):
    g = PoseGraph(mode)
    pose = Pose.identity()
    for k in range(n):
        g.add_node((0, k), pose)
        pose = pose @ step
    if prior:
        g.add_prior((0, 0), Pose.identity(), np.eye(6) * 1e-4)
    for k in range(n - 1):
        g.add_odometry((0, k), (0, k + 1), step, np.eye(6) * 1e-3)
    return g


# %% [markdown]
# ## Gauge freedom

# %%
g = chain(6, prior=False)
ev = np.linalg.eigvalsh(g.information_matrix())
print("near-zero eigenvalues:", int(np.sum(ev < 1e-8 * ev[-1])))
try:
    g.optimize()
except IllPosedError as exc:
    print("refused:", exc)

# %% [markdown]
# ## Marginals grow along odometry and collapse at a loop

# %%
g = chain(15)
g.optimize()
tr = [np.trace(c) for c in g.marginals().values()]
print("trace along chain:", np.round(tr[::3], 4))
z = se3.between(g.nodes[(0, 0)], g.nodes[(0, 14)])
g.add_loop((0, 0), (0, 14), RegistrationResult(z, np.eye(6) * 1e-4, 1.0, 0.0, 1, True))
g.optimize()
print(f"terminal trace {tr[-1]:.4f} -> {np.trace(g.marginals()[(0, 14)]):.4f}")

# %% [markdown]
# ## An inconsistent square
# Four edges around a unit square whose closing edge is 0.4 m too long.
# With equal weights FPGO splits the error evenly; UPGO with one very
# confident edge leaves that edge alone and loads the rest.

# %%
def square(mode, low=None):
    table = {PRIOR: (1e-6, 1e-6), ODOMETRY: (1e-2, 1e-2), LOOP: (1e-2, 1e-2)}
    g = PoseGraph(mode, table=table)
    turn = Pose(se3.so3_exp([0, 0, np.pi / 2]), np.array([1.0, 0, 0]))
    p = Pose.identity()
    for k in range(4):
        g.add_node((0, k), p)
        p = p @ turn
    g.add_prior((0, 0), Pose.identity(), np.eye(6) * 1e-6)
    cov = np.eye(6) * 1e-2
    for k in range(3):
        g.add_odometry((0, k), (0, k + 1), turn, cov / 100 if k == low else cov)
    bad = Pose(turn.R, turn.t + [0.4, 0, 0])
    g.add_loop((0, 3), (0, 0), RegistrationResult(bad, cov, 1.0, 0.0, 1, True))
    return g


for name, g in (("FPGO", square(FPGO)), ("UPGO", square(UPGO, low=1))):
    g.optimize()
    errs = [r.unweighted for r in g.edge_error_report() if r.kind != PRIOR]
    print(name, "per-edge error:", np.round(errs, 4))
