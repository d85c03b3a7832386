"""Voxelised Gaussian-mixture map and the Gaussian 2-Wasserstein distance.

Each voxel keeps sufficient statistics ``(n, sum p, sum p p^T)``; the
statistics are accumulated relative to the voxel's lower corner so that the
covariance does not suffer from cancellation far from the origin.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Set, Tuple

import numpy as np

VoxelKey = Tuple[int, int, int]

DEFAULT_MIN_POINTS = 6


class AsymmetricCovarianceError(ValueError):
    pass


def voxel_key(point, l: float) -> VoxelKey:
    """Integer voxel index ``floor(p / l)`` of a single point."""
    if l <= 0:
        raise ValueError("voxel size must be positive")
    p = np.asarray(point, dtype=float)
    i, j, k = np.floor(p / l).astype(np.int64)
    return int(i), int(j), int(k)


def voxel_keys(points: np.ndarray, l: float) -> np.ndarray:
    """Vectorised :func:`voxel_key`; returns an (N, 3) int64 array."""
    if l <= 0:
        raise ValueError("voxel size must be positive")
    return np.floor(np.asarray(points, dtype=float) / l).astype(np.int64)


_PACK_BITS = 21
_PACK_HALF = 1 << (_PACK_BITS - 1)


def unique_keys(keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``np.unique(keys, axis=0, return_inverse=True)`` for integer key rows,
    via a packed 1-D sort when the keys fit in 21 bits per axis."""
    if len(keys) and np.abs(keys).max() < _PACK_HALF:
        shifted = keys + _PACK_HALF
        packed = (shifted[:, 0] << (2 * _PACK_BITS)) | (shifted[:, 1] << _PACK_BITS) | shifted[:, 2]
        upacked, inverse = np.unique(packed, return_inverse=True)
        mask = (1 << _PACK_BITS) - 1
        uniq = np.stack([upacked >> (2 * _PACK_BITS), (upacked >> _PACK_BITS) & mask, upacked & mask], axis=1)
        return uniq - _PACK_HALF, inverse.reshape(-1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


@dataclass
class VoxelStats:
    """Sufficient statistics of the points that fell into one voxel.

    ``s1`` and ``s2`` are sums of ``p - anchor`` and its outer products.
    """

    anchor: np.ndarray
    n: int = 0
    s1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s2: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def add(self, points: np.ndarray) -> None:
        d = np.asarray(points, dtype=float).reshape(-1, 3) - self.anchor
        self.n += len(d)
        self.s1 = self.s1 + d.sum(axis=0)
        self.s2 = self.s2 + d.T @ d

    @property
    def mean(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("empty voxel has no mean")
        return self.anchor + self.s1 / self.n

    @property
    def cov(self) -> np.ndarray:
        """Sample covariance with the ``n - 1`` denominator (needs n >= 2)."""
        if self.n < 2:
            raise ValueError("covariance needs at least two points")
        m = self.s1 / self.n
        c = (self.s2 - self.n * np.outer(m, m)) / (self.n - 1)
        return 0.5 * (c + c.T)

    def copy(self) -> VoxelStats:
        return VoxelStats(self.anchor.copy(), self.n, self.s1.copy(), self.s2.copy())


class VoxelMap:
    """Hash map from voxel index to :class:`VoxelStats`.

    Parameters
    ----------
    l : float
        Voxel edge length in meters.
    r_map : float
        Retention radius used by :meth:`prune`.
    """

    def __init__(self, l: float, r_map: float = np.inf):
        if l <= 0:
            raise ValueError("voxel size must be positive")
        if r_map <= 0:
            raise ValueError("map radius must be positive")
        self.l = float(l)
        self.r_map = float(r_map)
        self.voxels: Dict[VoxelKey, VoxelStats] = {}

    def __len__(self) -> int:
        return len(self.voxels)

    def __contains__(self, key) -> bool:
        return key in self.voxels

    def __getitem__(self, key: VoxelKey) -> VoxelStats:
        return self.voxels[key]

    def keys(self):
        return self.voxels.keys()

    def items(self):
        return self.voxels.items()

    def touched_keys(self, points: np.ndarray) -> Set[VoxelKey]:
        """Keys that :meth:`insert_points` would modify for ``points``."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return set()
        uniq, _ = unique_keys(voxel_keys(points, self.l))
        return {(int(a), int(b), int(c)) for a, b, c in uniq}

    def snapshot(self, keys: Iterable[VoxelKey]) -> Dict[VoxelKey, VoxelStats]:
        """Copy the current stats of those ``keys`` that already exist."""
        return {k: self.voxels[k].copy() for k in keys if k in self.voxels}

    def insert_points(self, points: np.ndarray) -> Set[VoxelKey]:
        """Accumulate map-frame points; return the set of touched voxels."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return set()
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        keys = voxel_keys(points, self.l)
        uniq, inverse = unique_keys(keys)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
        touched = set()
        for u in range(len(uniq)):
            key = (int(uniq[u, 0]), int(uniq[u, 1]), int(uniq[u, 2]))
            stats = self.voxels.get(key)
            if stats is None:
                stats = VoxelStats(anchor=uniq[u].astype(float) * self.l)
                self.voxels[key] = stats
            stats.add(points[order[bounds[u] : bounds[u + 1]]])
            touched.add(key)
        return touched

    def voxel_center(self, key: VoxelKey) -> np.ndarray:
        return (np.asarray(key, dtype=float) + 0.5) * self.l

    def prune(self, center) -> int:
        """Drop voxels whose center is farther than ``r_map`` from ``center``."""
        if not np.isfinite(self.r_map):
            return 0
        center = np.asarray(center, dtype=float)
        doomed = [
            k for k in self.voxels if np.linalg.norm(self.voxel_center(k) - center) > self.r_map
        ]
        for k in doomed:
            del self.voxels[k]
        return len(doomed)

    def copy(self) -> VoxelMap:
        return copy.deepcopy(self)

    def dump(self) -> str:
        """Line-oriented debug dump: ``i j k n mu(3) s_xx s_xy s_xz s_yy s_yz s_zz``."""
        lines = []
        for key in sorted(self.voxels):
            st = self.voxels[key]
            mu = st.mean
            c = st.cov if st.n >= 2 else np.zeros((3, 3))
            vals = [*key, st.n, *mu, c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2]]
            lines.append(" ".join(repr(v) if isinstance(v, float) else str(v) for v in map(_plain, vals)))
        return "\n".join(lines) + ("\n" if lines else "")


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    return int(v)


def batch_stats(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and ``n - 1`` covariance of a point set, computed from scratch."""
    points = np.asarray(points, dtype=float)
    mu = points.mean(axis=0)
    d = points - mu
    return mu, d.T @ d / (len(points) - 1)


def gaussian_w2(mu1, sigma1, mu2, sigma2, asym_tol: float = 1e-6) -> float:
    """2-Wasserstein distance between two Gaussians, in the units of ``mu``.

    The covariance term ``tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`` is
    evaluated in its equivalent Procrustes form ``||S1^1/2 - S2^1/2 U||_F^2``
    (``U`` the orthogonal polar factor of ``S2^1/2 S1^1/2``), which is
    non-negative by construction and exactly zero for identical inputs.
    """
    dm = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    s = np.array([sigma1, sigma2], dtype=float)
    st = s.transpose(0, 2, 1)
    asym = np.abs(s - st).reshape(2, -1).max(axis=1)
    if asym.max() > asym_tol:
        raise AsymmetricCovarianceError(f"sigma{1 + int(asym[0] <= asym_tol)} is not symmetric")
    # Both PSD square roots from one batched eigendecomposition.
    w, v = np.linalg.eigh(0.5 * (s + st))
    r = (v * np.sqrt(np.clip(w, 0.0, None))[:, None, :]) @ v.transpose(0, 2, 1)
    a, _, bt = np.linalg.svd(r[1] @ r[0])
    diff = r[0] - r[1] @ (a @ bt)
    return float(np.sqrt(dm @ dm + np.sum(diff * diff)))


def map_w2(
    before: Mapping[VoxelKey, VoxelStats],
    after: VoxelMap,
    touched: Iterable[VoxelKey],
    min_points: int = DEFAULT_MIN_POINTS,
    weighted: bool = False,
) -> Tuple[float, int]:
    """Average W2 over voxel pairs changed by an insertion.

    A voxel contributes only if it already had ``min_points`` points before
    the insertion and still has them afterwards; voxels created by the
    insertion are skipped. With ``weighted`` the average is weighted by the
    post-insertion point count.

    Returns
    -------
    (distance, number of eligible pairs)
    """
    total = 0.0
    weight = 0.0
    count = 0
    for key in sorted(touched):
        old = before.get(key)
        new = after.voxels.get(key)
        if old is None or new is None or old.n < min_points or new.n < min_points:
            continue
        d = gaussian_w2(old.mean, old.cov, new.mean, new.cov)
        w = float(new.n) if weighted else 1.0
        total += w * d
        weight += w
        count += 1
    if count == 0:
        return 0.0, 0
    return total / weight, count
