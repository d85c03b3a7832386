from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .se3 import Pose


@dataclass
class OdometrySample:
    """One odometry output.

    ``pose`` is in the session frame, ``covariance`` is its right-tangent
    covariance and ``true_pose`` is the ground truth in the world frame
    (identity when unknown).
    """

    timestamp: float
    pose: Pose
    covariance: np.ndarray
    true_pose: Pose = field(default_factory=Pose.identity)


@dataclass
class Session:
    """Ordered odometry samples with one body-frame point cloud per sample."""

    session_id: int
    samples: List[OdometrySample] = field(default_factory=list)
    frames: List[np.ndarray] = field(default_factory=list)
    keyframes: Optional[List[int]] = None
    # Ground-truth pose of the session frame in the world frame.
    origin: Pose = field(default_factory=Pose.identity)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples])

    def positions(self) -> np.ndarray:
        return np.array([s.pose.t for s in self.samples]).reshape(-1, 3)

    def true_positions(self) -> np.ndarray:
        return np.array([s.true_pose.t for s in self.samples]).reshape(-1, 3)
