"""Point-to-plane ICP with a Gauss-Newton Hessian covariance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .se3 import Pose

MIN_CORRESPONDENCES = 6
MAX_SURFACE_VARIATION = 0.02


def estimate_normals(
    cloud: np.ndarray,
    k: int = 10,
    origin=(0.0, 0.0, 0.0),
    tree: Optional[cKDTree] = None,
    max_variation: float = MAX_SURFACE_VARIATION,
):
    """Per-point unit normals from the ``k``-neighbourhood covariance.

    Returns ``(normals, valid)``. A point is invalid when the two smallest
    eigenvalues of its neighbourhood covariance coincide (within 1e-12),
    i.e. the neighbourhood is a line or a point, or when the neighbourhood
    is not planar: surface variation ``l0 / (l0 + l1 + l2)`` above
    ``max_variation`` (creases and corners). Normals point toward ``origin``.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if k < 3:
        raise ValueError("need k >= 3 neighbours for a normal")
    if len(cloud) < k:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than k={k}")
    tree = cKDTree(cloud) if tree is None else tree
    _, idx = tree.query(cloud, k=k)
    nb = cloud[idx]
    d = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", d, d) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    valid = (w[:, 1] - w[:, 0]) > 1e-12 * np.maximum(1.0, w[:, 2])
    total = w.sum(axis=1)
    valid &= w[:, 0] <= max_variation * np.where(total > 0, total, 1.0)
    flip = np.einsum("ni,ni->n", normals, np.asarray(origin, dtype=float) - cloud) < 0
    normals[flip] *= -1.0
    normals[~valid] = 0.0
    return normals, valid


class RegistrationTarget:
    """Target cloud with its KD-tree and normals, built once and reusable
    across registrations (read-only afterwards)."""

    def __init__(self, points: np.ndarray, k_normals: int = 10, origin=(0.0, 0.0, 0.0), normals=None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("empty target cloud")
        self.tree = cKDTree(self.points)
        if normals is None:
            self.normals, self.valid = estimate_normals(self.points, k_normals, origin, self.tree)
        else:
            self.normals = np.asarray(normals, dtype=float)
            self.valid = np.linalg.norm(self.normals, axis=1) > 0.5


@dataclass
class ICPConfig:
    max_corr_dist: float = 1.0
    max_iter: int = 30
    tol: float = 1e-7
    k_normals: int = 10
    noise_scale: float = 0.01
    max_condition: float = 1e8


@dataclass
class RegistrationResult:
    pose: Pose
    covariance: Optional[np.ndarray]
    fitness: float
    rms: float
    iterations: int
    converged: bool
    degenerate: bool = False
    hessian: Optional[np.ndarray] = None
    condition: float = np.inf
    history: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def usable(self) -> bool:
        return self.converged and not self.degenerate and self.covariance is not None


def _linearize(source, target: RegistrationTarget, T: Pose, max_dist: float):
    moved = T.act(source)
    dist, idx = target.tree.query(moved, distance_upper_bound=max_dist)
    ok = np.isfinite(dist)
    ok[ok] &= target.valid[idx[ok]]
    p = source[ok]
    q = target.points[idx[ok]]
    n = target.normals[idx[ok]]
    r = np.einsum("ni,ni->n", n, moved[ok] - q)
    nb = n @ T.R  # R^T n, per row
    J = np.hstack([np.cross(p, nb), nb])
    return r, J, p, q, n, int(ok.sum())


def _cost(source_pts, q, n, T: Pose) -> float:
    r = np.einsum("ni,ni->n", n, T.act(source_pts) - q)
    return float(r @ r)


def icp_point_to_plane(
    source: np.ndarray,
    target,
    init: Optional[Pose] = None,
    cfg: Optional[ICPConfig] = None,
) -> RegistrationResult:
    """Align ``source`` to ``target``; the returned pose maps source-frame
    points into the target frame.

    The covariance is ``noise_scale * (J^T J)^-1`` with ``J`` the
    point-to-plane Jacobian at the converged pose with respect to a right
    perturbation ``T * exp(d)``.
    """
    cfg = cfg or ICPConfig()
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    if not isinstance(target, RegistrationTarget):
        target = RegistrationTarget(target, cfg.k_normals)
    if len(source) == 0:
        raise ValueError("empty source cloud")
    T = init if init is not None else Pose.identity()
    history: List[Tuple[float, float]] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        r, J, p, q, n, m = _linearize(source, target, T, cfg.max_corr_dist)
        if m < MIN_CORRESPONDENCES:
            return RegistrationResult(T, None, m / len(source), np.inf, it, False, True)
        cost0 = float(r @ r)
        step = -np.linalg.lstsq(J.T @ J, J.T @ r, rcond=None)[0]
        alpha = 1.0
        for _ in range(20):
            cand = T @ se3.exp(alpha * step)
            cost1 = _cost(p, q, n, cand)
            if cost1 <= cost0:
                break
            alpha *= 0.5
        else:
            cand, cost1 = T, cost0
        history.append((cost0, cost1))
        T = cand
        if np.linalg.norm(alpha * step) < cfg.tol:
            converged = True
            break

    r, J, _, _, _, m = _linearize(source, target, T, cfg.max_corr_dist)
    fitness = m / len(source)
    if m < MIN_CORRESPONDENCES:
        return RegistrationResult(T, None, fitness, np.inf, it, False, True, history=history)
    rms = float(np.sqrt(np.mean(r * r)))
    H = J.T @ J
    ev = np.linalg.eigvalsh(H)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
    degenerate = not cond <= cfg.max_condition
    cov = None if degenerate else se3.symmetrize(cfg.noise_scale * np.linalg.inv(H))
    return RegistrationResult(T, cov, fitness, rms, it, converged, degenerate, H, cond, history)
