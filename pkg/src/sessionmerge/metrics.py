"""Trajectory and map metrics: ATE, accuracy (AC), Chamfer distance (CD) and
mean map entropy (MME)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .se3 import Pose

MME_RADIUS = {"indoor": 0.1, "outdoor": 0.2}


class MetricError(ValueError):
    pass


class NoInliersError(MetricError):
    def __init__(self, message: str, inlier_fraction: float = 0.0):
        super().__init__(message)
        self.inlier_fraction = inlier_fraction


@dataclass
class MetricConfig:
    knn_dist: float = 1.0
    inlier_dist: float = 0.5
    mme_radius: float = MME_RADIUS["indoor"]
    mme_min_points: int = 10
    assoc_tol: float = 0.02
    det_floor: float = 1e-18
    align: bool = True

    def __post_init__(self) -> None:
        if not (0 < self.inlier_dist <= self.knn_dist):
            raise ValueError("need 0 < inlier_dist <= knn_dist")
        if self.mme_radius <= 0 or self.mme_min_points < 4 or self.assoc_tol < 0:
            raise ValueError("invalid MME radius, minimum neighbour count or association tolerance")


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.timestamps) != len(self.positions):
            raise MetricError("trajectory timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise MetricError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, timestamps, poses: Sequence[Pose]) -> "Trajectory":
        return cls(timestamps, np.array([p.t for p in poses]).reshape(-1, 3))


def associate(t_est: np.ndarray, t_ref: np.ndarray, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest reference timestamp for each estimate stamp, kept when within
    ``tol``. Returns index arrays into both."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_ref) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.clip(np.searchsorted(t_ref, t_est), 1, len(t_ref) - 1) if len(t_ref) > 1 else np.zeros(len(t_est), int)
    if len(t_ref) > 1:
        left = j - 1
        j = np.where(np.abs(t_ref[left] - t_est) <= np.abs(t_ref[j] - t_est), left, j)
    ok = np.abs(t_ref[j] - t_est) <= tol
    return np.flatnonzero(ok), j[ok]


def umeyama(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform (no scale) minimizing ``sum |dst - (R src + t)|^2``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


def ate(estimated: Trajectory, truth: Trajectory, cfg: Optional[MetricConfig] = None, align: Optional[bool] = None) -> float:
    """Positional RMSE after timestamp association and optional SE(3)
    alignment of the estimate onto the truth."""
    cfg = cfg or MetricConfig()
    align = cfg.align if align is None else align
    ie, it = associate(estimated.timestamps, truth.timestamps, cfg.assoc_tol)
    if len(ie) < 2:
        raise MetricError(f"only {len(ie)} associated poses (need >= 2) within {cfg.assoc_tol} s")
    p = estimated.positions[ie]
    q = truth.positions[it]
    if align:
        p = umeyama(p, q).act(p)
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def _check_cloud(cloud, name: str) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise MetricError(f"{name} cloud is empty")
    return cloud


def nearest_distances(src, dst, max_dist: float = np.inf) -> np.ndarray:
    """Distance from each ``src`` point to its nearest ``dst`` point (inf
    beyond ``max_dist``); also the per-point error scalars for export."""
    src = _check_cloud(src, "source")
    dst = _check_cloud(dst, "target")
    d, _ = cKDTree(dst).query(src, distance_upper_bound=max_dist)
    return d


def accuracy(estimate, truth, cfg: Optional[MetricConfig] = None) -> Tuple[float, float]:
    """RMSE over inlier nearest-neighbour pairs and the inlier fraction."""
    cfg = cfg or MetricConfig()
    d = nearest_distances(estimate, truth, cfg.knn_dist)
    inl = d < cfg.inlier_dist
    frac = float(inl.mean())
    if not inl.any():
        raise NoInliersError("no inlier point pairs", frac)
    return float(np.sqrt(np.mean(d[inl] ** 2))), frac


def chamfer(p, q) -> float:
    """Mean nearest distance P->Q plus mean nearest distance Q->P."""
    return float(nearest_distances(p, q).mean() + nearest_distances(q, p).mean())


def mme(cloud, cfg: Optional[MetricConfig] = None) -> Tuple[float, float]:
    """Mean of ``0.5 ln det(2 pi e Sigma)`` over points whose radius-``r``
    neighbourhood has enough points and a determinant above the floor."""
    cfg = cfg or MetricConfig()
    cloud = _check_cloud(cloud, "map")
    tree = cKDTree(cloud)
    nbrs = tree.query_ball_point(cloud, cfg.mme_radius)
    counts = np.array([len(n) for n in nbrs])
    keep = counts >= cfg.mme_min_points
    if not keep.any():
        raise MetricError(f"no point has {cfg.mme_min_points} neighbours within {cfg.mme_radius} m")
    flat = np.concatenate([nbrs[i] for i in np.flatnonzero(keep)]).astype(int)
    c = counts[keep]
    starts = np.concatenate([[0], np.cumsum(c)[:-1]])
    pts = cloud[flat]
    # Centre each neighbourhood on its query point before accumulating.
    pts = pts - np.repeat(cloud[keep], c, axis=0)
    s1 = np.add.reduceat(pts, starts, axis=0)
    s2 = np.add.reduceat(np.einsum("ni,nj->nij", pts, pts), starts, axis=0)
    n = c[:, None, None].astype(float)
    mu = s1 / c[:, None]
    cov = (s2 - n * np.einsum("ni,nj->nij", mu, mu)) / (n - 1)
    det = np.linalg.det(2 * np.pi * np.e * cov)
    ok = det > cfg.det_floor * (2 * np.pi * np.e) ** 3
    if not ok.any():
        raise MetricError("every neighbourhood covariance is degenerate")
    h = 0.5 * np.log(det[ok])
    return float(h.mean()), float(ok.sum() / len(cloud))


@dataclass
class MetricReport:
    ate_m: float = float("nan")
    ac_m: float = float("nan")
    cd_m: float = float("nan")
    mme: float = float("nan")
    inlier_fraction: float = float("nan")

    def to_kv(self) -> str:
        return "".join(f"{k}={v!r}\n" if np.isnan(v) else f"{k}={v:.17g}\n" for k, v in asdict(self).items())

    def to_text(self) -> str:
        lines = [
            f"ATE (m)           : {self.ate_m:.6f}",
            f"Accuracy AC (m)   : {self.ac_m:.6f}",
            f"Chamfer CD (m)    : {self.cd_m:.6f}",
            f"Mean map entropy  : {self.mme:.6f}",
            f"Inlier fraction   : {self.inlier_fraction:.6f}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        names = {f.name for f in fields(cls)}
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in names:
                raise MetricError(f"report line {lineno}: unexpected entry {line!r}")
            try:
                vals[key] = float(val)
            except ValueError as exc:
                raise MetricError(f"report line {lineno}: bad number {val!r}") from exc
        return cls(**vals)
