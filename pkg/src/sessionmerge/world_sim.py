"""Deterministic synthetic worlds: planar scenes, trajectories, noisy scans and
a drifting odometry source that reports SE(3) covariances.

All randomness comes from Philox streams keyed by ``(seed, stream)``, so a
session is a pure function of its scene and spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import se3
from .se3 import Pose
from .session import OdometrySample, Session

_DRIFT_STREAM = 0
_PAIR_STREAM = 2**31
_BEAM_STREAM = 2**32


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


@dataclass(frozen=True)
class Patch:
    """Rectangle ``corner + s*u + t*v`` for ``s, t`` in [0, 1]; ``u`` is
    perpendicular to ``v``. ``density`` is in points per square meter."""

    corner: Tuple[float, float, float]
    u: Tuple[float, float, float]
    v: Tuple[float, float, float]
    density: float = 10.0

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        c, u, v = (np.asarray(a, dtype=float) for a in (self.corner, self.u, self.v))
        d = np.asarray(points, dtype=float) - c
        s = d @ u / (u @ u)
        t = d @ v / (v @ v)
        off = np.abs(d @ self.normal)
        return (off <= tol) & (s >= -tol) & (s <= 1 + tol) & (t >= -tol) & (t <= 1 + tol)


@dataclass
class Scene:
    patches: List[Patch] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.patches) < 3:
            raise ValueError("scene needs at least three patches")
        for p in self.patches:
            if abs(np.dot(p.u, p.v)) > 1e-9 * np.linalg.norm(p.u) * np.linalg.norm(p.v):
                raise ValueError("patch edges must be perpendicular")
            if p.area <= 0 or p.density <= 0:
                raise ValueError("patch must have positive area and density")
        normals = np.array([p.normal for p in self.patches])
        if np.linalg.matrix_rank(normals, tol=1e-6) < 3:
            raise ValueError("scene patch normals must span 3D")

    def sample(self, density_scale: float = 1.0, seed: int = 0) -> np.ndarray:
        """Dense ground-truth cloud over every patch."""
        rng = _rng(seed, 2**40)
        out = []
        for p in self.patches:
            n = int(np.ceil(p.area * p.density * density_scale))
            st = rng.uniform(size=(n, 2))
            out.append(np.asarray(p.corner) + st[:, :1] * p.u + st[:, 1:] * p.v)
        return np.concatenate(out) if out else np.zeros((0, 3))

    def closest_points(self, points: np.ndarray, margin: float = 0.5) -> np.ndarray:
        """Nearest point on the union of patches for every query point, the
        limit of an infinitely dense ground-truth cloud.

        Each patch only examines points inside its bounding box grown by
        ``margin``; points farther than ``margin`` from every patch fall
        back to a full search, so the result is exact either way.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        best = np.full(len(pts), np.inf)
        out = np.zeros_like(pts)

        def visit(p, sel):
            c, u, v = (np.asarray(a, dtype=float) for a in (p.corner, p.u, p.v))
            d = pts[sel] - c
            s = np.clip(d @ u / (u @ u), 0.0, 1.0)
            t = np.clip(d @ v / (v @ v), 0.0, 1.0)
            q = c + s[:, None] * u + t[:, None] * v
            dist = np.sum((pts[sel] - q) ** 2, axis=1)
            closer = dist < best[sel]
            idx = sel[closer]
            best[idx] = dist[closer]
            out[idx] = q[closer]

        for p in self.patches:
            corners = np.asarray(p.corner) + np.array([[0, 0, 0], p.u, p.v, np.add(p.u, p.v)])
            lo, hi = corners.min(axis=0) - margin, corners.max(axis=0) + margin
            visit(p, np.flatnonzero(np.all((pts >= lo) & (pts <= hi), axis=1)))
        far = np.flatnonzero(best > margin**2)
        if len(far):
            for p in self.patches:
                visit(p, far)
        return out

    def on_surface(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        hit = np.zeros(len(points), dtype=bool)
        for p in self.patches:
            hit |= p.contains(points, tol)
        return hit


def box_patch_faces(lo, hi, density: float, skip: Sequence[str] = ()) -> List[Patch]:
    """Outward faces of an axis-aligned box; ``skip`` drops faces by name
    (``-x +x -y +y -z +z``)."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    dx, dy, dz = hi - lo
    faces = {
        "-x": Patch(tuple(lo), (0, 0, dz), (0, dy, 0), density),
        "+x": Patch((hi[0], lo[1], lo[2]), (0, dy, 0), (0, 0, dz), density),
        "-y": Patch(tuple(lo), (dx, 0, 0), (0, 0, dz), density),
        "+y": Patch((lo[0], hi[1], lo[2]), (0, 0, dz), (dx, 0, 0), density),
        "-z": Patch(tuple(lo), (0, dy, 0), (dx, 0, 0), density),
        "+z": Patch((lo[0], lo[1], hi[2]), (dx, 0, 0), (0, dy, 0), density),
    }
    return [f for name, f in faces.items() if name not in skip]


def orthogonal_planes_scene(size: float = 10.0, density: float = 20.0) -> Scene:
    """Floor plus two perpendicular walls meeting at the origin."""
    return Scene(
        [
            Patch((0, 0, 0), (size, 0, 0), (0, size, 0), density),
            Patch((0, 0, 0), (0, size, 0), (0, 0, size), density),
            Patch((0, 0, 0), (0, 0, size), (size, 0, 0), density),
        ]
    )


def corridor_loop_scene(
    length: float = 40.0,
    width: float = 24.0,
    corridor: float = 4.0,
    height: float = 3.0,
    density: float = 4.0,
    pillar_spacing: float = 6.0,
    pillar_size: float = 0.6,
    origin: Tuple[float, float, float] = (0.37, 0.29, -0.41),
) -> Scene:
    """Rectangular ring corridor around a solid block, with pillars along the
    outer wall so that no corridor stretch is translation-degenerate.

    ``origin`` shifts the whole scene; the default keeps floor and walls off
    the faces of common voxel grids, where noisy points would flip between
    neighbouring voxels.
    """
    L, W, c, h = length, width, corridor, height
    patches: List[Patch] = []
    # Floor and ceiling as four strips.
    for z in (0.0, h):
        for lo, hi in (
            ((0, 0), (L, c)),
            ((0, W - c), (L, W)),
            ((0, c), (c, W - c)),
            ((L - c, c), (L, W - c)),
        ):
            patches.append(Patch((lo[0], lo[1], z), (hi[0] - lo[0], 0, 0), (0, hi[1] - lo[1], 0), density))
    # Outer walls.
    patches += [
        Patch((0, 0, 0), (L, 0, 0), (0, 0, h), density),
        Patch((0, W, 0), (L, 0, 0), (0, 0, h), density),
        Patch((0, 0, 0), (0, W, 0), (0, 0, h), density),
        Patch((L, 0, 0), (0, W, 0), (0, 0, h), density),
    ]
    # Inner block walls.
    patches += [
        Patch((c, c, 0), (L - 2 * c, 0, 0), (0, 0, h), density),
        Patch((c, W - c, 0), (L - 2 * c, 0, 0), (0, 0, h), density),
        Patch((c, c, 0), (0, W - 2 * c, 0), (0, 0, h), density),
        Patch((L - c, c, 0), (0, W - 2 * c, 0), (0, 0, h), density),
    ]
    s = pillar_size
    for x in np.arange(pillar_spacing / 2, L - 1.0, pillar_spacing):
        patches += box_patch_faces((x, 0, 0), (x + s, s, h), density, skip=("-y", "-z", "+z"))
        patches += box_patch_faces((x, W - s, 0), (x + s, W, h), density, skip=("+y", "-z", "+z"))
    for y in np.arange(pillar_spacing / 2 + c, W - c - 1.0, pillar_spacing):
        patches += box_patch_faces((0, y, 0), (s, y + s, h), density, skip=("-x", "-z", "+z"))
        patches += box_patch_faces((L - s, y, 0), (L, y + s, h), density, skip=("+x", "-z", "+z"))
    o = np.asarray(origin, dtype=float)
    return Scene([Patch(tuple(np.asarray(p.corner) + o), p.u, p.v, p.density) for p in patches])


@dataclass
class SessionSpec:
    """Trajectory and sensor description.

    ``waypoints`` rows are ``(x, y, z)`` or ``(x, y, z, dwell_seconds)``.
    Drift rates are random-walk densities (rad/sqrt(s), m/sqrt(s)).
    """

    waypoints: List[Tuple[float, ...]]
    speed: float = 1.0
    rate: float = 2.0
    scan_range: float = 12.0
    point_noise: float = 0.01
    drift_rot: float = 0.0
    drift_trans: float = 0.0
    init_sigma_rot: float = 1e-5
    init_sigma_trans: float = 1e-4
    seed: int = 0
    session_id: int = 0
    local_frame: bool = True
    beams: int = 4000


def _path_profile(spec: SessionSpec):
    wp = [tuple(float(x) for x in w) for w in spec.waypoints]
    if not wp:
        raise ValueError("session spec has no waypoints")
    pts = np.array([w[:3] for w in wp])
    dwell = np.array([w[3] if len(w) > 3 else 0.0 for w in wp])
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    # Time knots: arrive at i, dwell, depart.
    knots_t, knots_s = [0.0], [0.0]
    s = 0.0
    t = 0.0
    for i in range(len(pts)):
        if dwell[i] > 0:
            t += dwell[i]
            knots_t.append(t)
            knots_s.append(s)
        if i < len(seg_len):
            t += seg_len[i] / spec.speed
            s += seg_len[i]
            knots_t.append(t)
            knots_s.append(s)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    return pts, cum, np.array(knots_t), np.array(knots_s)


def _point_at(pts, cum, s):
    s = np.clip(s, 0.0, cum[-1])
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, max(len(pts) - 2, 0)))
    if len(pts) == 1:
        return pts[0]
    seg = cum[i + 1] - cum[i]
    a = 0.0 if seg == 0 else (s - cum[i]) / seg
    return pts[i] + a * (pts[i + 1] - pts[i])


def true_trajectory(spec: SessionSpec, lookahead: float = 1.0) -> Tuple[np.ndarray, List[Pose]]:
    """Timestamps and ground-truth poses; heading follows the path tangent."""
    pts, cum, kt, ks = _path_profile(spec)
    n = int(np.floor(kt[-1] * spec.rate + 1e-9)) + 1
    times = np.arange(n) / spec.rate
    poses = []
    last_yaw = 0.0
    for t in times:
        s = float(np.interp(t, kt, ks))
        p = _point_at(pts, cum, s)
        d = _point_at(pts, cum, s + lookahead) - _point_at(pts, cum, s - lookahead)
        if np.hypot(d[0], d[1]) > 1e-9:
            last_yaw = float(np.arctan2(d[1], d[0]))
        poses.append(Pose(se3.so3_exp([0.0, 0.0, last_yaw]), p))
    return times, poses


def beam_pattern(spec: SessionSpec) -> np.ndarray:
    """Unit ray directions fixed in the sensor frame, uniform on the sphere.

    Drawn once per session, so a stationary sensor re-observes the same
    surface points as a spinning LiDAR does.
    """
    d = _rng(spec.seed, _BEAM_STREAM).normal(size=(spec.beams, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def raycast(scene: Scene, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """First-hit world points of rays ``origin + t * dirs`` with ``t <= max_range``."""
    o = np.asarray(origin, dtype=float)
    best = np.full(len(dirs), np.inf)
    for p in scene.patches:
        c, u, v = (np.asarray(a, dtype=float) for a in (p.corner, p.u, p.v))
        n = p.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / (dirs @ n)
        ok = np.isfinite(t) & (t > 1e-9) & (t < best) & (t <= max_range)
        if not ok.any():
            continue
        d = o + t[ok, None] * dirs[ok] - c
        s = d @ u / (u @ u)
        w = d @ v / (v @ v)
        inside = (s >= 0) & (s <= 1) & (w >= 0) & (w <= 1)
        idx = np.flatnonzero(ok)[inside]
        best[idx] = t[idx]
    hit = np.isfinite(best)
    return o + best[hit, None] * dirs[hit]


def scan(
    scene: Scene,
    pose: Pose,
    spec: SessionSpec,
    rng: np.random.Generator,
    noise: bool = True,
    beams: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Ray-cast the sensor's beam pattern from ``pose``: body-frame first
    hits within ``scan_range`` plus isotropic N(0, point_noise^2) noise."""
    beams = beam_pattern(spec) if beams is None else beams
    world = raycast(scene, pose.t, beams @ pose.R.T, spec.scan_range)
    body = (world - pose.t) @ pose.R
    if noise and spec.point_noise > 0:
        body = body + rng.normal(scale=spec.point_noise, size=body.shape)
    return body


def generate_session(scene: Scene, spec: SessionSpec) -> Session:
    """Simulate one session: truth, drifting odometry with covariance, scans.

    Odometry composes the true increment with a body-frame random-walk
    error ``exp(w)``, ``w ~ N(0, Q dt)``. The accumulated error covariance is
    tracked in the world-anchored tangent space (where it only ever grows by
    ``Ad(T) Q dt Ad(T)^T``) and converted to the right-tangent covariance of
    each pose with :func:`se3.transform_covariance`.
    """
    scene.validate()
    times, truth = true_trajectory(spec)
    dt = 1.0 / spec.rate
    q = np.diag([spec.drift_rot**2] * 3 + [spec.drift_trans**2] * 3) * dt
    drift_rng = _rng(spec.seed, _DRIFT_STREAM)

    origin = truth[0] if spec.local_frame else Pose.identity()
    origin_inv = origin.inverse()
    p0 = np.diag([spec.init_sigma_rot**2] * 3 + [spec.init_sigma_trans**2] * 3)

    est = truth[0]
    err_world = se3.transform_covariance(p0, est)
    samples: List[OdometrySample] = []
    frames: List[np.ndarray] = []
    beams = beam_pattern(spec)
    for k, (t, T) in enumerate(zip(times, truth)):
        if k > 0:
            w = drift_rng.normal(size=6) * np.sqrt(np.diag(q))
            est = est @ se3.between(truth[k - 1], T) @ se3.exp(w)
            err_world = se3.symmetrize(err_world + se3.transform_covariance(q, est))
        cov = se3.transform_covariance(err_world, est.inverse())
        samples.append(OdometrySample(float(t), origin_inv @ est, cov, T))
        frames.append(scan(scene, T, spec, _rng(spec.seed, k + 1), beams=beams))
    return Session(spec.session_id, samples, frames, origin=origin)


def error_covariances(session: Session) -> List[np.ndarray]:
    """World-anchored error covariance of every sample (inverse of the
    conversion done in :func:`generate_session`)."""
    return [se3.transform_covariance(s.covariance, s.pose) for s in session.samples]


def perturbation(rot: float, trans: float, rng: np.random.Generator) -> Pose:
    """Pose with rotation angle ``rot`` and translation norm ``trans`` about
    random directions."""
    a = rng.normal(size=3)
    b = rng.normal(size=3)
    return Pose(se3.so3_exp(rot * a / np.linalg.norm(a)), trans * b / np.linalg.norm(b))


def overlap_pair(
    scene: Scene,
    spec_a: SessionSpec,
    spec_b: SessionSpec,
    init_rot: float = 0.0,
    init_trans: float = 0.0,
) -> Tuple[Session, Session, Pose]:
    """Two sessions plus an initial guess of the pose of ``b``'s frame in
    ``a``'s frame, perturbed by the given magnitudes."""
    a = generate_session(scene, spec_a)
    b = generate_session(scene, spec_b)
    truth = se3.between(a.origin, b.origin)
    if init_rot == 0.0 and init_trans == 0.0:
        return a, b, truth
    noise = perturbation(init_rot, init_trans, _rng(spec_b.seed, _PAIR_STREAM))
    return a, b, truth @ noise
