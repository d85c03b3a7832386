# %% [markdown]
# # Poses, tangent noise and covariance propagation
#
# Poses are 4x4 rigid transforms. Noise lives in the 6-dimensional tangent
# space, ordered rotation first, and is applied on the right: ``T exp(eps)``.
# This script walks through exp/log, the adjoint and the two covariance
# rules used by the merge pipeline, and checks both against sampling.

# %%
import numpy as np

from sessionmerge import se3

rng = np.random.default_rng(0)

# %% [markdown]
# ## exp and log
# A quarter turn about z combined with a 1 m step.

# %%
xi = np.array([0, 0, np.pi / 2, 1.0, 0, 0])
T = se3.exp(xi)
print(np.round(T.matrix(), 6))
print("log(exp(xi)) - xi:", np.abs(se3.log(T) - xi).max())

# %% [markdown]
# ## Moving noise between frames
# ``transform_covariance(C, T)`` is ``Ad(T) C Ad(T)^T``: the covariance of
# the same perturbation seen from the parent frame. The check pushes samples
# through ``T exp(eps) T^-1``.

# %%
A = rng.normal(size=(6, 6))
C = (A @ A.T + 0.1 * np.eye(6)) * 1e-4
T = se3.exp([0.4, -0.3, 1.1, 2.0, -1.0, 0.5])
eps = rng.multivariate_normal(np.zeros(6), C, size=5000)
pushed = np.array([se3.log(T @ se3.exp(e) @ T.inverse()) for e in eps])
emp = np.cov(pushed, rowvar=False)
ana = se3.transform_covariance(C, T)
print("relative Frobenius error:", np.linalg.norm(emp - ana) / np.linalg.norm(ana))

# %% [markdown]
# ## Relative pose covariance
# Odometry edges between keyframes ``a`` and ``b`` get the covariance of
# ``a^-1 b`` from the two absolute covariances, assuming they are
# independent. The rule is first order: compared with the same draws pushed
# through the linearized map, its error shrinks with the noise level.

# %%
a = se3.exp([0.2, -0.1, 0.7, 3.0, 1.0, -0.5])
b = se3.exp([0.1, 0.3, 1.2, 4.0, 2.5, 0.3])
mean = se3.between(a, b)
Ad = se3.adjoint(mean.inverse())
unit_i = rng.normal(size=(4000, 6))
unit_j = rng.normal(size=(4000, 6))
for sigma in (0.05, 0.02, 0.01):
    ei, ej = unit_i * sigma, unit_j * sigma
    rel = np.array([se3.log(mean.inverse() @ se3.between(a @ se3.exp(x), b @ se3.exp(y))) for x, y in zip(ei, ej)])
    lin = -ei @ Ad.T + ej
    ana = se3.relative_pose_covariance(a, np.eye(6) * sigma**2, b, np.eye(6) * sigma**2)
    sample_err = np.linalg.norm(np.cov(rel, rowvar=False) - ana) / np.linalg.norm(ana)
    model_err = np.linalg.norm(np.cov(rel, rowvar=False) - np.cov(lin, rowvar=False)) / np.linalg.norm(ana)
    print(f"sigma {sigma:5.2f}: vs formula {sample_err:.3f}, first-order error {model_err:.2e}")
