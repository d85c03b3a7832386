"""Two-session merge: keyframe gating, loop registration against the old
map, pose-graph optimization per mode and merged-map assembly.

Modes:

* ``UPGO`` loops against the old keyframe map, per-edge derived covariances.
* ``FPGO`` the same graph with the fixed noise table.
* ``F2F``  loops against the combined map (old keyframes and earlier new
  keyframes), fixed noise.
* ``M2F``  each new keyframe is localized in the old map and constrained by
  a unary map prior instead of a loop, fixed noise.

Everything is expressed in the old session's frame (the map frame).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .factor_graph import FPGO, LOOP, ODOMETRY, PRIOR, UPGO, IllPosedError, NodeId, OptimizerConfig, OptReport, PoseGraph
from .keyframe import KeyframeConfig, KeyframeSelector
from .metrics import MetricConfig, Trajectory, ate
from .registration import ICPConfig, RegistrationResult, RegistrationTarget, estimate_normals, icp_point_to_plane
from .se3 import Pose
from .session import Session

F2F = "F2F"
M2F = "M2F"
MODES = (UPGO, FPGO, F2F, M2F)

OLD, NEW = 0, 1


@dataclass
class PipelineConfig:
    """Every merge setting; ``noise_scale`` is the registration noise scale
    ``s`` and overrides ``icp.noise_scale``."""

    mode: str = UPGO
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    icp: ICPConfig = field(default_factory=ICPConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    noise_scale: float = 1e-2
    seed: int = 0
    loop_radius: float = 5.0
    submap_radius: float = 10.0
    submap_max_keyframes: int = 10
    min_fitness: float = 0.5
    f2f_gap: int = 10
    anchor_prior: bool = True
    init_rot: float = 0.0
    init_trans: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.noise_scale <= 0 or self.loop_radius <= 0 or self.submap_radius <= 0:
            raise ValueError("noise_scale, loop_radius and submap_radius must be positive")
        if not 0 <= self.min_fitness <= 1:
            raise ValueError("min_fitness must lie in [0, 1]")
        self.icp.noise_scale = self.noise_scale

    @property
    def graph_mode(self) -> str:
        return UPGO if self.mode == UPGO else FPGO


SECTIONS = {"keyframe": KeyframeConfig, "icp": ICPConfig, "optimizer": OptimizerConfig, "metrics": MetricConfig}


def config_keys() -> List[str]:
    keys = []
    for f in fields(PipelineConfig):
        if f.name in SECTIONS:
            keys += [f"{f.name}.{g.name}" for g in fields(SECTIONS[f.name])]
        else:
            keys.append(f.name)
    return keys


def _convert(value: str, like, key: str):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: bad boolean {value!r}")
    if like is None:
        return None if value.lower() == "none" else float(value)
    try:
        return type(like)(value)
    except ValueError:
        raise ValueError(f"{key}: bad value {value!r}") from None


def _defaults(cls) -> Dict[str, object]:
    return {f.name: f.default for f in fields(cls)}


def build_config(values: Dict[str, str]) -> PipelineConfig:
    """Config from flat ``key -> text`` pairs such as ``keyframe.l`` or
    ``mode``. Unknown keys raise ``KeyError``; bad values ``ValueError``."""
    unknown = sorted(set(values) - set(config_keys()))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    top, sect = {}, {name: {} for name in SECTIONS}
    for key, val in values.items():
        if "." in key:
            s, name = key.split(".", 1)
            sect[s][name] = _convert(val, _defaults(SECTIONS[s])[name], key)
        else:
            top[key] = _convert(val, _defaults(PipelineConfig)[key], key)
    parts = {s: cls(**sect[s]) for s, cls in SECTIONS.items()}
    return PipelineConfig(**top, **parts)


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        items = [(f"{f.name}.{g.name}", getattr(v, g.name)) for g in fields(v)] if is_dataclass(v) else [(f.name, v)]
        for k, x in items:
            if isinstance(x, bool):
                x = "true" if x else "false"
            elif isinstance(x, float):
                x = f"{x:.17g}"
            lines.append(f"{k}={x}")
    return "\n".join(lines) + "\n"


@dataclass
class LoopRecord:
    """One registration attempt between old (or earlier) node ``i`` and new
    node ``j``; ``i`` is None for M2F map localization."""

    i: Optional[NodeId]
    j: NodeId
    fitness: float
    rms: float
    converged: bool
    degenerate: bool
    accepted: bool


@dataclass
class MergeResult:
    cfg: PipelineConfig
    graph: PoseGraph
    report: OptReport
    initial: Dict[NodeId, Pose]
    timestamps: Dict[NodeId, float]
    truth: Dict[NodeId, Pose]
    loops: List[LoopRecord]
    decisions: List[tuple]
    clouds: Dict[NodeId, np.ndarray]
    origin: Pose
    registrations: Dict[tuple, RegistrationResult] = field(default_factory=dict, repr=False)

    @property
    def poses(self) -> Dict[NodeId, Pose]:
        return self.graph.nodes

    def nodes_of(self, side: int) -> List[NodeId]:
        return [n for n in self.graph.nodes if n[0] == side]

    @property
    def accepted_loops(self) -> int:
        return sum(r.accepted for r in self.loops)

    def trajectory(self, side: int = NEW, initial: bool = False) -> Trajectory:
        nodes = self.nodes_of(side)
        src = self.initial if initial else self.poses
        return Trajectory.from_poses([self.timestamps[n] for n in nodes], [src[n] for n in nodes])

    def truth_trajectory(self, side: int = NEW) -> Trajectory:
        nodes = self.nodes_of(side)
        return Trajectory.from_poses([self.timestamps[n] for n in nodes], [self.truth[n] for n in nodes])

    def ate(self, side: int = NEW, initial: bool = False) -> float:
        return ate(self.trajectory(side, initial), self.truth_trajectory(side), self.cfg.metrics)

    def merged_cloud(self, poses: Optional[Dict[NodeId, Pose]] = None) -> np.ndarray:
        """Keyframe clouds under the optimized poses, in the map frame."""
        poses = self.poses if poses is None else poses
        parts = [poses[n].act(self.clouds[n]) for n in self.graph.nodes]
        return np.concatenate(parts) if parts else np.zeros((0, 3))


def select_keyframes(session: Session, cfg: KeyframeConfig) -> Tuple[List[int], List[tuple]]:
    """Session keyframes, running the gate when the session has none."""
    if session.keyframes is not None:
        return list(session.keyframes), []
    sel = KeyframeSelector(cfg)
    for k, (frame, s) in enumerate(zip(session.frames, session.samples)):
        sel.push(frame, s.pose, k)
    return [r[0] for r in sel.records if r[2]], sel.records


def _add_chain(graph: PoseGraph, side: int, session: Session, kfs: Sequence[int], to_map: Pose) -> None:
    for k in kfs:
        graph.add_node((side, k), to_map @ session.samples[k].pose)
    for a, b in zip(kfs, kfs[1:]):
        sa, sb = session.samples[a], session.samples[b]
        cov = se3.relative_pose_covariance(sa.pose, sa.covariance, sb.pose, sb.covariance)
        graph.add_odometry((side, a), (side, b), se3.between(sa.pose, sb.pose), cov)


class _Submaps:
    """Local registration targets around a new keyframe's estimated
    position. Normals are estimated once per keyframe cloud in its own
    sensor frame and rotated into each submap."""

    def __init__(self, clouds: Dict[NodeId, np.ndarray], cfg: PipelineConfig):
        self.clouds = clouds
        self.cfg = cfg
        self.normals: Dict[NodeId, np.ndarray] = {}

    def _normals(self, node: NodeId) -> np.ndarray:
        if node not in self.normals:
            cloud = self.clouds[node]
            if len(cloud) > self.cfg.icp.k_normals:
                n, _ = estimate_normals(cloud, self.cfg.icp.k_normals)
            else:
                n = np.zeros_like(cloud)
            self.normals[node] = n
        return self.normals[node]

    def target(self, centre: np.ndarray, members: Sequence[NodeId], poses: Dict[NodeId, Pose], frame: Pose):
        """Target from the keyframes in ``members`` closest to the map-frame
        point ``centre``, expressed in ``frame`` (a map-frame pose)."""
        pos = np.array([poses[m].t for m in members])
        d = np.linalg.norm(pos - centre, axis=1)
        near = [members[k] for k in np.argsort(d, kind="stable") if d[k] <= self.cfg.submap_radius]
        near = near[: self.cfg.submap_max_keyframes]
        inv = frame.inverse()
        rel = [inv @ poses[m] for m in near]
        pts = np.concatenate([r.act(self.clouds[m]) for r, m in zip(rel, near)])
        nrm = np.concatenate([self._normals(m) @ r.R.T for r, m in zip(rel, near)])
        return RegistrationTarget(pts, normals=nrm)


def _nearest(candidates: Sequence[NodeId], poses: Dict[NodeId, Pose], p: np.ndarray, radius: float):
    if not candidates:
        return None
    pos = np.array([poses[c].t for c in candidates])
    d, k = cKDTree(pos).query(p)
    return candidates[int(k)] if d <= radius else None


def merge_sessions(
    old: Session,
    new: Session,
    init: Pose,
    cfg: Optional[PipelineConfig] = None,
    reuse: Optional[MergeResult] = None,
) -> MergeResult:
    """Merge ``new`` into ``old``. ``init`` is the initial guess of the new
    session frame in the old session frame.

    ``reuse`` is an earlier result on the same sessions and keyframe and
    registration settings. Its keyframes are taken over, and so is every
    registration of a (target, source) pair that comes up again; UPGO and
    FPGO attempt identical registrations.

    Raises :class:`IllPosedError` when the resulting graph has a component
    without an anchoring prior (for example when no loop was accepted).
    """
    cfg = cfg or PipelineConfig()
    if reuse is not None:
        old_kf = [n[1] for n in reuse.nodes_of(OLD)]
        new_kf, decisions = [n[1] for n in reuse.nodes_of(NEW)], reuse.decisions
    else:
        old_kf, _ = select_keyframes(old, cfg.keyframe)
        new_kf, decisions = select_keyframes(new, cfg.keyframe)
    if not old_kf or not new_kf:
        raise ValueError("both sessions need at least one keyframe")

    graph = PoseGraph(cfg.graph_mode)
    _add_chain(graph, OLD, old, old_kf, Pose.identity())
    _add_chain(graph, NEW, new, new_kf, init)
    if cfg.anchor_prior:
        first = old.samples[old_kf[0]]
        graph.add_prior((OLD, old_kf[0]), first.pose, first.covariance)

    clouds = {(OLD, k): old.frames[k] for k in old_kf}
    clouds.update({(NEW, k): new.frames[k] for k in new_kf})
    timestamps = {(OLD, k): old.samples[k].timestamp for k in old_kf}
    timestamps.update({(NEW, k): new.samples[k].timestamp for k in new_kf})
    # Ground truth in the map frame.
    to_map = old.origin.inverse()
    truth = {(OLD, k): to_map @ old.samples[k].true_pose for k in old_kf}
    truth.update({(NEW, k): to_map @ new.samples[k].true_pose for k in new_kf})

    poses = graph.nodes
    old_nodes = [(OLD, k) for k in old_kf]
    submaps = _Submaps(clouds, cfg)
    loops: List[LoopRecord] = []
    done: Dict[tuple, RegistrationResult] = {}
    cached = reuse.registrations if reuse is not None else {}

    def register(key, target_fn, init_pose):
        if key in cached:
            done[key] = cached[key]
        else:
            done[key] = icp_point_to_plane(clouds[key[2]], target_fn(), init_pose, cfg.icp)
        return done[key]

    for idx, k in enumerate(new_kf):
        j = (NEW, k)
        if cfg.mode == F2F:
            pool = old_nodes + [(NEW, m) for m in new_kf[: max(idx - cfg.f2f_gap, 0)]]
        else:
            pool = old_nodes
        i = _nearest(pool, poses, poses[j].t, cfg.loop_radius)
        if i is None:
            continue
        if cfg.mode == M2F:
            res = register(("map", i, j), lambda: submaps.target(poses[j].t, old_nodes, poses, Pose.identity()), poses[j])
            ok = _acceptable(res, cfg)
            if ok:
                graph.add_prior(j, res.pose, res.covariance, table_kind=LOOP, source="map")
            loops.append(LoopRecord(None, j, res.fitness, res.rms, res.converged, res.degenerate, ok))
            continue
        members = [m for m in pool if m[0] == i[0]] if cfg.mode == F2F else old_nodes
        key = ("f2f" if cfg.mode == F2F else "old", i, j)
        res = register(key, lambda: submaps.target(poses[j].t, members, poses, poses[i]), se3.between(poses[i], poses[j]))
        ok = _acceptable(res, cfg) and graph.add_loop(i, j, res)
        loops.append(LoopRecord(i, j, res.fitness, res.rms, res.converged, res.degenerate, ok))

    initial = dict(graph.nodes)
    try:
        report = graph.optimize(cfg.optimizer)
    except IllPosedError as exc:
        kinds = [f.kind for f in graph.factors]
        raise IllPosedError(
            f"{exc}; graph has {len(graph.nodes)} nodes, {kinds.count(PRIOR)} prior, "
            f"{kinds.count(ODOMETRY)} odometry and {kinds.count(LOOP)} loop factors "
            f"({sum(r.accepted for r in loops)} of {len(loops)} registrations accepted)"
        ) from None
    return MergeResult(cfg, graph, report, initial, timestamps, truth, loops, decisions, clouds, old.origin, done)


def _acceptable(res: RegistrationResult, cfg: PipelineConfig) -> bool:
    if not res.converged or res.degenerate or res.fitness < cfg.min_fitness:
        return False
    return res.covariance is not None or cfg.graph_mode == FPGO
