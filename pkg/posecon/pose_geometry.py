"""
Pose geometry -- keypoint normalization and inter-frame pose distances.

A raw 2D pose is centered on its centroid, scaled to unit mean
centroid-distance and rotated so the head joint lands on the positive
x-axis. Distances between normalized poses drive negative mining.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from posecon.errors import DegeneratePose, InvalidInput, ShapeMismatch

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Tolerances
# ---------------------------------------------------------------------------

_MIN_AVG_DISTANCE = 1e-9
_MIN_HEAD_DISTANCE = 1e-9


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawPose:
    """K (x, y) keypoints in pixel units plus the index of the head joint."""

    keypoints: np.ndarray
    head_index: int = 0

    @property
    def num_keypoints(self) -> int:
        return int(np.shape(self.keypoints)[0])


@dataclass(frozen=True)
class NormalizedPose:
    keypoints: np.ndarray

    @property
    def num_keypoints(self) -> int:
        return int(self.keypoints.shape[0])

    def flatten(self) -> np.ndarray:
        """Return the (x1, y1, ..., xK, yK) vector fed to the pose encoder."""
        return self.keypoints.reshape(-1)


@dataclass(frozen=True)
class NormalizationTrace:
    centroid: np.ndarray
    avg_distance: float
    angle: float
    rotation_matrix: np.ndarray


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _as_keypoints(pose: RawPose) -> np.ndarray:
    kp = np.asarray(pose.keypoints, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 2:
        raise ShapeMismatch(f"keypoints must have shape (K, 2), got {kp.shape}")
    if kp.shape[0] < 2:
        raise InvalidInput(f"need at least 2 keypoints, got {kp.shape[0]}")
    if not 0 <= pose.head_index < kp.shape[0]:
        raise InvalidInput(f"head_index {pose.head_index} outside [0, {kp.shape[0]})")
    if not np.all(np.isfinite(kp)):
        raise InvalidInput("keypoints contain non-finite coordinates")
    return kp


def normalize_pose(pose: RawPose) -> tuple[NormalizedPose, NormalizationTrace]:
    """Center, scale and rotate a raw pose.

    Rows are right-multiplied by ``[[cos, -sin], [sin, cos]]`` where the angle
    is the two-argument arctangent of the scaled head joint, which maps the
    head onto the non-negative x-axis.

    Raises:
        DegeneratePose: every keypoint sits at the centroid.
        InvalidInput: non-finite coordinates or a bad head index.
    """
    kp = _as_keypoints(pose)

    centroid = kp.mean(axis=0)
    centered = kp - centroid
    avg_distance = float(np.linalg.norm(centered, axis=1).mean())
    if avg_distance < _MIN_AVG_DISTANCE:
        raise DegeneratePose(f"all {kp.shape[0]} keypoints coincide at {centroid.tolist()}")

    scaled = centered / avg_distance

    head_x, head_y = scaled[pose.head_index]
    if np.hypot(head_x, head_y) < _MIN_HEAD_DISTANCE:
        # head at the centroid: rotation is undefined, keep identity
        angle = 0.0
    else:
        angle = float(np.arctan2(head_y, head_x))
        if angle <= -np.pi:
            angle += 2.0 * np.pi

    cos, sin = np.cos(angle), np.sin(angle)
    rotation = np.array([[cos, -sin], [sin, cos]])
    normalized = scaled @ rotation

    trace = NormalizationTrace(
        centroid=centroid,
        avg_distance=avg_distance,
        angle=angle,
        rotation_matrix=rotation,
    )
    return NormalizedPose(keypoints=normalized), trace


def normalize_sequence(
    poses: Sequence[Optional[RawPose]],
) -> tuple[list[Optional[NormalizedPose]], list[int]]:
    """Normalize a per-frame pose track.

    Missing frames (``None``) stay ``None``. A degenerate frame is replaced by
    the nearest preceding valid normalized pose, or ``None`` when there is none.

    Returns:
        The normalized track and the indices of frames that were degenerate.
    """
    normalized: list[Optional[NormalizedPose]] = []
    degenerate: list[int] = []
    last_valid: Optional[NormalizedPose] = None

    for t, raw in enumerate(poses):
        if raw is None:
            normalized.append(None)
            continue
        try:
            norm, _ = normalize_pose(raw)
        except DegeneratePose:
            degenerate.append(t)
            normalized.append(last_valid)
            continue
        normalized.append(norm)
        last_valid = norm

    if degenerate:
        logger.debug("Degenerate pose frames: %s", degenerate)
    return normalized, degenerate


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def pose_distance(a: NormalizedPose, b: NormalizedPose) -> float:
    """Mean per-keypoint Euclidean distance between two normalized poses."""
    ka = np.asarray(a.keypoints, dtype=np.float64)
    kb = np.asarray(b.keypoints, dtype=np.float64)
    if ka.shape != kb.shape:
        raise ShapeMismatch(f"pose shapes differ: {ka.shape} vs {kb.shape}")
    return float(np.linalg.norm(ka - kb, axis=1).mean())


def pose_distance_matrix(keypoints: np.ndarray) -> np.ndarray:
    """All-pairs ``pose_distance`` for a stacked (T, K, 2) array."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 3 or kp.shape[2] != 2:
        raise ShapeMismatch(f"expected (T, K, 2) keypoints, got {kp.shape}")
    diff = kp[:, None, :, :] - kp[None, :, :, :]
    return np.linalg.norm(diff, axis=3).mean(axis=2)
