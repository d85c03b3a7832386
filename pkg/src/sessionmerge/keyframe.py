"""Keyframe gating: average voxel-Gaussian W2 change, plus a motion baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from . import se3
from .gmm_map import DEFAULT_MIN_POINTS, VoxelMap, map_w2
from .se3 import Pose

WASSERSTEIN = "wasserstein"
RADIUS = "radius"


@dataclass
class KeyframeConfig:
    """Gate parameters.

    ``tau`` defaults to ``0.3 * l`` when left as ``None``.
    """

    l: float = 5.0
    r_map: float = 800.0
    tau: Optional[float] = None
    mode: str = WASSERSTEIN
    d_t: float = 0.1
    d_r: float = 0.1
    min_points: int = DEFAULT_MIN_POINTS
    weighted: bool = False

    def __post_init__(self) -> None:
        if self.tau is None:
            self.tau = 0.3 * self.l
        if self.mode not in (WASSERSTEIN, RADIUS):
            raise ValueError(f"unknown keyframe mode {self.mode!r}")
        if not (self.tau > 0 and self.l > 0 and self.r_map > self.l):
            raise ValueError("keyframe config needs tau > 0, l > 0 and r_map > l")


@dataclass
class KeyframeDecision:
    b: int
    d_w: float = 0.0
    touched: int = 0
    eligible: int = 0
    voxels: int = 0


def decide(frame: np.ndarray, pose: Pose, vmap: VoxelMap, cfg: KeyframeConfig) -> KeyframeDecision:
    """Insert one body-frame scan into ``vmap`` and gate it.

    The map is updated whether or not the frame becomes a keyframe, and is
    pruned around the frame position afterwards. A frame arriving at an
    empty map is always a keyframe.
    """
    frame = np.asarray(frame, dtype=float).reshape(-1, 3)
    if len(frame) == 0:
        return KeyframeDecision(b=0, voxels=len(vmap))
    bootstrap = len(vmap) == 0
    pts = pose.act(frame)
    touched = vmap.touched_keys(pts)
    before = vmap.snapshot(touched)
    vmap.insert_points(pts)
    d_w, eligible = map_w2(before, vmap, touched, cfg.min_points, cfg.weighted)
    vmap.prune(pose.t)
    b = 1 if (bootstrap or d_w > cfg.tau) else 0
    return KeyframeDecision(b=b, d_w=d_w, touched=len(touched), eligible=eligible, voxels=len(vmap))


def decide_radius(pose: Pose, last_kf_pose: Optional[Pose], cfg: KeyframeConfig) -> KeyframeDecision:
    """Motion-threshold baseline: keyframe when translation or rotation
    since the last keyframe exceeds ``d_t`` / ``d_r``."""
    if last_kf_pose is None:
        return KeyframeDecision(b=1)
    rel = se3.between(last_kf_pose, pose)
    dt = float(np.linalg.norm(rel.t))
    dr = float(np.linalg.norm(se3.so3_log(rel.R)))
    return KeyframeDecision(b=int(dt > cfg.d_t or dr > cfg.d_r), d_w=0.0)


@dataclass
class KeyframeSelector:
    """Sequential gate that owns its voxel map and keeps a decision log."""

    cfg: KeyframeConfig = field(default_factory=KeyframeConfig)

    def __post_init__(self) -> None:
        self.vmap = VoxelMap(self.cfg.l, self.cfg.r_map)
        self.records: List[tuple] = []
        self._last_kf: Optional[Pose] = None

    def push(self, frame: np.ndarray, pose: Pose, frame_id: Optional[int] = None) -> KeyframeDecision:
        if self.cfg.mode == WASSERSTEIN:
            dec = decide(frame, pose, self.vmap, self.cfg)
        else:
            dec = decide_radius(pose, self._last_kf, self.cfg)
        if dec.b:
            self._last_kf = pose
        fid = len(self.records) if frame_id is None else frame_id
        self.records.append((fid, dec.d_w, dec.b, dec.touched, dec.voxels))
        return dec

    def run(self, frames: Iterable[np.ndarray], poses: Iterable[Pose]) -> List[KeyframeDecision]:
        return [self.push(f, p) for f, p in zip(frames, poses)]

    @property
    def keyframe_ratio(self) -> float:
        if not self.records:
            return 0.0
        return sum(r[2] for r in self.records) / len(self.records)

    def log_text(self) -> str:
        return format_decision_log(self.records)


def format_decision_log(records) -> str:
    """One line per frame: ``frame_id d_w b touched voxels``."""
    lines = ["# frame d_w b touched voxels"]
    for fid, d_w, b, touched, voxels in records:
        lines.append(f"{fid} {d_w:.17g} {b} {touched} {voxels}")
    return "\n".join(lines) + "\n"


def parse_decision_log(text: str) -> List[tuple]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"decision log line {lineno}: expected 5 fields, got {len(parts)}")
        out.append((int(parts[0]), float(parts[1]), int(parts[2]), int(parts[3]), int(parts[4])))
    return out
