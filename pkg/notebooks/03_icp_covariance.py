# %% [markdown]
# # Point-to-plane registration and its covariance
#
# The loop edges of the pose graph come from point-to-plane ICP. At the
# optimum, ``s (J^T J)^-1`` with noise scale ``s`` predicts the spread of the
# recovered pose. Here the prediction is checked against repeated
# registrations with fresh target noise, and a single plane shows up as
# degenerate.

# %%
import numpy as np

from sessionmerge import se3
from sessionmerge.registration import ICPConfig, RegistrationTarget, icp_point_to_plane
from sessionmerge.se3 import Pose

rng = np.random.default_rng(2)
g = (np.arange(40) + 0.5) * 0.1
a, b = (m.ravel() for m in np.meshgrid(g, g))
z = np.zeros_like(a)
planes = np.vstack([np.column_stack([a, b, z]), np.column_stack([z, a, b]), np.column_stack([b, z, a])])
normals = np.repeat(np.eye(3)[[2, 0, 1]], len(a), axis=0)

true = Pose(se3.so3_exp([0.01, -0.02, 0.015]), np.array([0.05, -0.03, 0.04]))
source = true.inverse().act(planes)

# %%
sigma = 0.01
cfg = ICPConfig(noise_scale=sigma**2, k_normals=20)
errs, covs = [], []
for _ in range(100):
    target = RegistrationTarget(planes + rng.normal(scale=sigma, size=len(planes))[:, None] * normals, k_normals=20, origin=(2, 2, 2))
    res = icp_point_to_plane(source, target, Pose.identity(), cfg)
    errs.append(se3.log(se3.between(true, res.pose)))
    covs.append(res.covariance)
emp = np.cov(np.array(errs).T)
pred = np.mean(covs, axis=0)
print("diag empirical / predicted:", np.round(np.diag(emp) / np.diag(pred), 2))

# %% [markdown]
# ## Degenerate geometry
# A floor alone cannot pin down in-plane translation or yaw.

# %%
floor = planes[planes[:, 2] == 0]
res = icp_point_to_plane(floor, RegistrationTarget(floor), Pose.identity(), cfg)
print(f"degenerate={res.degenerate}, condition={res.condition:.2e}")
