"""
Cross-modal contrastive losses with vanilla or pose-supervised negative mining.

For every anchor frame t the only positive is the same frame in the other
modality. Vanilla mining treats every other frame as a negative; pose-supervised
mining keeps only frames whose normalized pose lies at least ``delta`` away from
the anchor's. The loss is the sum of the RGB->pose and pose->RGB terms.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, softmax

from posecon.embedding_nets import (
    EncoderParams,
    ProjectionParams,
    encode_poses,
    pose_encoder_backward,
    project_features,
    rgb_project_backward,
)
from posecon.errors import ConfigError, EmptySequence, IndexOutOfRange, ShapeMismatch
from posecon.pose_geometry import NormalizedPose, pose_distance_matrix

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------

DEFAULT_TAU = 0.07
DEFAULT_DELTA = 0.15
_NORM_FLOOR = 1e-12


class MiningStrategy(str, Enum):
    VANILLA = "vanilla"
    POSE_SUPERVISED = "pose"


@dataclass(frozen=True)
class MiningConfig:
    strategy: MiningStrategy = MiningStrategy.POSE_SUPERVISED
    delta: float = DEFAULT_DELTA
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.delta >= 0:
            raise ConfigError(f"delta must be non-negative, got {self.delta}")
        object.__setattr__(self, "strategy", MiningStrategy(self.strategy))


@dataclass(frozen=True)
class PairSets:
    anchor: int
    positives: frozenset
    negatives: frozenset


@dataclass(frozen=True)
class LossReport:
    l_i2p: float = 0.0
    l_p2i: float = 0.0
    l_con: float = 0.0
    l_segment: float = 0.0
    l_final: float = 0.0

    @classmethod
    def combine(cls, l_i2p: float, l_p2i: float, l_segment: float) -> "LossReport":
        l_con = l_i2p + l_p2i
        return cls(l_i2p=l_i2p, l_p2i=l_p2i, l_con=l_con, l_segment=l_segment, l_final=l_con + l_segment)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_i2p": self.l_i2p,
            "l_p2i": self.l_p2i,
            "l_con": self.l_con,
            "l_segment": self.l_segment,
            "l_final": self.l_final,
        }


# ---------------------------------------------------------------------------
# Mining
# ---------------------------------------------------------------------------

def _stack_poses(poses: Sequence[NormalizedPose]) -> np.ndarray:
    shapes = {np.shape(p.keypoints) for p in poses}
    if len(shapes) > 1:
        raise ShapeMismatch(f"poses do not share one keypoint layout: {sorted(shapes)}")
    return np.stack([np.asarray(p.keypoints, dtype=np.float64) for p in poses])


def negative_mask(config: MiningConfig, poses: Sequence[NormalizedPose]) -> np.ndarray:
    """(T, T) boolean matrix; row t marks the negatives of anchor t."""
    t = len(poses)
    off_diagonal = ~np.eye(t, dtype=bool)
    if config.strategy is MiningStrategy.VANILLA:
        return off_diagonal
    distances = pose_distance_matrix(_stack_poses(poses))
    return off_diagonal & (distances >= config.delta)


def _pairsets_from_mask(mask: np.ndarray) -> list[PairSets]:
    return [
        PairSets(anchor=t, positives=frozenset({t}), negatives=frozenset(np.flatnonzero(row).tolist()))
        for t, row in enumerate(mask)
    ]


def mine_all(config: MiningConfig, poses: Sequence[NormalizedPose]) -> list[PairSets]:
    return _pairsets_from_mask(negative_mask(config, poses))


def mine_pairs(config: MiningConfig, poses: Sequence[NormalizedPose], t: int) -> PairSets:
    """Positive and negative frame sets for anchor ``t``."""
    if not 0 <= t < len(poses):
        raise IndexOutOfRange(f"anchor {t} outside [0, {len(poses)})")
    if config.strategy is MiningStrategy.VANILLA:
        negatives = frozenset(j for j in range(len(poses)) if j != t)
        return PairSets(anchor=t, positives=frozenset({t}), negatives=negatives)

    stacked = _stack_poses(poses)
    distances = np.linalg.norm(stacked - stacked[t], axis=2).mean(axis=1)
    negatives = frozenset(j for j in np.flatnonzero(distances >= config.delta).tolist() if j != t)
    return PairSets(anchor=t, positives=frozenset({t}), negatives=negatives)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

EmbeddingsLike = Union[np.ndarray, Sequence]


def _as_matrix(embeddings: EmbeddingsLike) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.atleast_2d(embeddings.astype(np.float64))
    return np.stack([np.asarray(getattr(e, "vector", e), dtype=np.float64) for e in embeddings])


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _NORM_FLOOR)
    return x / norms, norms


def _normalize_rows_backward(d_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    floored = norms[:, 0] <= _NORM_FLOOR
    radial = (unit * d_unit).sum(axis=1, keepdims=True)
    grad = (d_unit - unit * radial) / norms
    grad[floored] = d_unit[floored] / _NORM_FLOOR
    return grad


def _mask_from_pairsets(pairsets: Sequence[PairSets], t: int) -> np.ndarray:
    mask = np.zeros((t, t), dtype=bool)
    for ps in pairsets:
        if not 0 <= ps.anchor < t:
            raise IndexOutOfRange(f"pair set anchor {ps.anchor} outside [0, {t})")
        if ps.anchor in ps.negatives or ps.positives & ps.negatives:
            raise ShapeMismatch(f"pair set for anchor {ps.anchor} lists a positive as negative")
        if ps.negatives:
            idx = np.fromiter(ps.negatives, dtype=int)
            if idx.min() < 0 or idx.max() >= t:
                raise IndexOutOfRange(f"negative index outside [0, {t}) for anchor {ps.anchor}")
            mask[ps.anchor, idx] = True
    return mask


def _directional_loss(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over anchors of -log softmax of the diagonal over {t} plus negatives."""
    t = logits.shape[0]
    candidates = mask | np.eye(t, dtype=bool)
    masked = np.where(candidates, logits, -np.inf)

    per_anchor = logsumexp(masked, axis=1) - np.diag(logits)
    per_anchor[~mask.any(axis=1)] = 0.0

    grad = softmax(masked, axis=1)
    grad[np.diag_indices(t)] -= 1.0
    grad[~mask.any(axis=1)] = 0.0
    return float(per_anchor.sum() / t), grad / t


def contrastive_loss(
    rgb: EmbeddingsLike,
    pose: EmbeddingsLike,
    pairsets: Sequence[PairSets],
    config: MiningConfig,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE over cosine similarities.

    ``pairsets`` holds one entry per anchor and serves both directions.

    Returns:
        A LossReport with ``l_segment = 0`` and the gradients with respect to
        the (T, D) RGB and pose embedding matrices.
    """
    rgb_m = _as_matrix(rgb) if len(rgb) else np.zeros((0, 0))
    pose_m = _as_matrix(pose) if len(pose) else np.zeros((0, 0))
    if rgb_m.shape[0] == 0 or pose_m.shape[0] == 0:
        raise EmptySequence("contrastive loss needs at least one frame")
    if rgb_m.shape != pose_m.shape:
        raise ShapeMismatch(f"RGB embeddings {rgb_m.shape} and pose embeddings {pose_m.shape} differ")

    t = rgb_m.shape[0]
    mask = _mask_from_pairsets(pairsets, t)

    rgb_unit, rgb_norms = _normalize_rows(rgb_m)
    pose_unit, pose_norms = _normalize_rows(pose_m)
    sim = rgb_unit @ pose_unit.T

    l_i2p, d_i2p = _directional_loss(sim / config.tau, mask)
    l_p2i, d_p2i = _directional_loss(sim.T / config.tau, mask)

    d_sim = (d_i2p + d_p2i.T) / config.tau
    d_rgb = _normalize_rows_backward(d_sim @ pose_unit, rgb_unit, rgb_norms)
    d_pose = _normalize_rows_backward(d_sim.T @ rgb_unit, pose_unit, pose_norms)

    return LossReport.combine(l_i2p, l_p2i, 0.0), d_rgb, d_pose


# ---------------------------------------------------------------------------
# Composition with the embedding networks
# ---------------------------------------------------------------------------

def embed_and_contrast(
    encoder: EncoderParams,
    projection: ProjectionParams,
    poses: Sequence[Optional[NormalizedPose]],
    features: np.ndarray,
    config: MiningConfig,
    train_seed: int = 0,
) -> tuple[LossReport, dict[str, dict[str, np.ndarray]]]:
    """Embed both streams, mine pairs, and backpropagate L_con to both networks.

    Frames whose pose is ``None`` take no part: they are neither anchors nor
    candidates, and T in the loss normalization counts participating frames.

    Returns:
        The LossReport (``l_con`` is the scalar loss) and gradients keyed
        ``{"encoder": {...}, "projection": {...}}``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] != len(poses):
        raise ShapeMismatch(f"{len(poses)} poses but {features.shape[0]} feature rows")

    valid = [i for i, p in enumerate(poses) if p is not None]
    grads = {
        "encoder": {name: np.zeros_like(arr) for name, arr in encoder.tensors().items()},
        "projection": {name: np.zeros_like(arr) for name, arr in projection.tensors().items()},
    }
    if not valid:
        logger.debug("No frame carries a pose; contrastive loss is zero")
        return LossReport(), grads

    valid_poses = [poses[i] for i in valid]
    valid_features = features[valid]

    rgb = project_features(projection, valid_features)
    pose_inputs = np.stack([p.flatten() for p in valid_poses])
    pose_emb, cache = encode_poses(encoder, pose_inputs, train_mode=True, rng_seed=train_seed)

    pairsets = mine_all(config, valid_poses)
    report, d_rgb, d_pose = contrastive_loss(rgb, pose_emb, pairsets, config)

    enc_grads = pose_encoder_backward(encoder, cache, d_pose)
    enc_grads.pop("input")
    proj_grads = rgb_project_backward(projection, valid_features, d_rgb)
    proj_grads.pop("input")
    grads["encoder"] = enc_grads
    grads["projection"] = proj_grads
    return report, grads
