"""Rigid-body math on SO(3) / SE(3) and tangent-space covariance transforms.

Conventions used throughout the package:

* Twists are 6-vectors ordered ``[omega | v]`` (rotation first, radians,
  then translation, meters). Every 6x6 matrix follows the same ordering.
* Perturbations are applied on the right, ``T * exp(xi)``, so covariances
  live in the body-frame tangent space of the pose they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Rotation angles closer than this to pi are rejected by log().
PI_MARGIN = 1e-6
_SMALL_ANGLE = 1e-4


class BranchCutError(ValueError):
    """Raised when log() is asked for a rotation too close to pi."""


def skew(w: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``w``."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def symmetrize(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c + c.T)


@dataclass(frozen=True, eq=False)
class Pose:
    """Element of SE(3): ``p_world = R @ p_body + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> Pose:
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.R) - 1.0) < tol
            and np.all(np.isfinite(self.t))
        )

    def __repr__(self) -> str:
        return f"Pose(rotvec={so3_log(self.R, strict=False)}, t={self.t})"


# --------------------------------------------------------------------- SO(3)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < _SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0 + theta2**2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2**2 / 720.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray, strict: bool = True) -> np.ndarray:
    """Rotation vector of ``R`` on the principal branch.

    With ``strict`` set, angles within ``PI_MARGIN`` of pi raise
    :class:`BranchCutError` instead of silently picking an axis sign.
    """
    R = np.asarray(R, dtype=float)
    # sin(theta) * axis, taken from the skew part.
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    sin_theta = float(np.linalg.norm(s))
    theta = float(np.arctan2(sin_theta, c))
    if theta > np.pi - PI_MARGIN:
        if strict:
            raise BranchCutError(
                f"rotation angle {theta:.9f} rad is within {PI_MARGIN} of pi; "
                "log() is ambiguous there"
            )
        # Non-strict path (used only for printing): axis from the symmetric part.
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        return theta * axis / np.linalg.norm(axis)
    if theta < _SMALL_ANGLE:
        return (1.0 + theta * theta / 6.0 + 7.0 * theta**4 / 360.0) * s
    return (theta / sin_theta) * s


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < _SMALL_ANGLE**2:
        b = 0.5 - theta2 / 24.0 + theta2**2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2**2 / 5040.0
    else:
        theta = np.sqrt(theta2)
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 0.05**2:
        d = 1.0 / 12.0 + theta2 / 720.0 + theta2**2 / 30240.0 + theta2**3 / 1209600.0
    else:
        theta = np.sqrt(theta2)
        d = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    return np.eye(3) - 0.5 * W + d * (W @ W)


# --------------------------------------------------------------------- SE(3)


def exp(xi: np.ndarray) -> Pose:
    """Closed-form exponential of a ``[omega | v]`` twist."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def log(p: Pose) -> np.ndarray:
    """Inverse of :func:`exp` on the principal branch.

    Raises
    ------
    BranchCutError
        If the rotation angle is within ``PI_MARGIN`` of pi.
    """
    w = so3_log(p.R)
    v = so3_left_jacobian_inv(w) @ p.t
    return np.concatenate([w, v])


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(a: Pose) -> Pose:
    return a.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose ``a^-1 * b``."""
    Rt = a.R.T
    return Pose(Rt @ b.R, Rt @ (b.t - a.t))


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint, ``p * exp(xi) * p^-1 = exp(adjoint(p) @ xi)``."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.R
    A[3:, 3:] = p.R
    A[3:, :3] = skew(p.t) @ p.R
    return A


def ad(xi: np.ndarray) -> np.ndarray:
    """Small adjoint (Lie bracket matrix) of a twist."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    W = skew(xi[:3])
    A[:3, :3] = W
    A[3:, 3:] = W
    A[3:, :3] = skew(xi[3:])
    return A


def _q_block(xi: np.ndarray) -> np.ndarray:
    # Coupling block of the SE(3) left Jacobian (Barfoot's Q), [omega | v] order.
    w, v = xi[:3], xi[3:]
    W, V = skew(w), skew(v)
    theta2 = float(w @ w)
    # The closed forms cancel badly below ~0.05 rad; the series is exact to
    # double precision there.
    if theta2 < 0.05**2:
        t4 = theta2 * theta2
        c1 = 1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0 - t4 * theta2 / 362880.0
        c2 = 1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0 - t4 * theta2 / 3628800.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0 - t4 * theta2 / 9979200.0
    else:
        theta = np.sqrt(theta2)
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / (theta2 * theta)
        c2 = (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (W @ WV + VW @ W - 3.0 * WVW)
        + c3 * (WVW @ W + W @ WVW)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    J = np.zeros((6, 6))
    Jw = so3_left_jacobian(xi[:3])
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _q_block(xi)
    return J


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ _q_block(xi) @ Ji
    return out


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Exact inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1 d``."""
    return left_jacobian_inv(-np.asarray(xi, dtype=float))


# ---------------------------------------------------------------- covariance


def transform_covariance(cov: np.ndarray, p: Pose) -> np.ndarray:
    """Push a tangent covariance through ``adjoint(p)``."""
    A = adjoint(p)
    return symmetrize(A @ np.asarray(cov, dtype=float) @ A.T)


def relative_pose_covariance(
    pose_i: Pose, cov_i: np.ndarray, pose_j: Pose, cov_j: np.ndarray
) -> np.ndarray:
    """First-order covariance of ``between(pose_i, pose_j)``.

    Both inputs are right-tangent covariances and are treated as
    independent. The result lives in the tangent space of the relative
    pose (right perturbation):

        Sigma_ij = Ad(T_j^-1) Ad(T_i) Sigma_i (...)^T + Sigma_j
    """
    A = adjoint(pose_j.inverse()) @ adjoint(pose_i)
    return symmetrize(A @ np.asarray(cov_i, dtype=float) @ A.T + np.asarray(cov_j, dtype=float))


def is_psd(cov: np.ndarray, sym_tol: float = 1e-9, eig_tol: float = 1e-10) -> bool:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        return False
    if not np.all(np.isfinite(cov)):
        return False
    if np.max(np.abs(cov - cov.T)) > sym_tol * max(1.0, np.max(np.abs(cov))):
        return False
    return bool(np.linalg.eigvalsh(symmetrize(cov)).min() >= -eig_tol * max(1.0, np.max(np.abs(cov))))


def random_pose(rng: np.random.Generator, rot_scale: float = 1.0, trans_scale: float = 1.0) -> Pose:
    """Random pose with rotation angle kept away from pi."""
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.0, min(rot_scale, np.pi - 0.2))
    return Pose(so3_exp(w), rng.normal(scale=trans_scale, size=3))
