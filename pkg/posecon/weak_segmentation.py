"""
Transcript-constrained segmentation backbone.

Frames are scored by a linear classifier head on the projected RGB embedding
(or, for the reference heads, on the pose embedding alone or concatenated with it),
aligned to the video's transcript by dynamic programming (offline) or by a
causal prefix DP (online), and trained on the resulting pseudo labels jointly
with the contrastive loss:

    L_final = L_con + L_segment

Tie-break in every DP: among equal-score predecessors prefer the later
boundary, i.e. earlier segments run as long as possible.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from posecon.contrastive import LossReport, MiningConfig, MiningStrategy, embed_and_contrast
from posecon.embedding_nets import (
    DEFAULT_DROPOUT,
    DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN,
    EncoderParams,
    ProjectionParams,
    encode_poses,
    pose_encoder_backward,
    project_features,
    rgb_project_backward,
)
from posecon.errors import ConfigError, InfeasibleTranscript, NumericDivergence, ShapeMismatch
from posecon.pose_geometry import NormalizedPose, RawPose

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------

DEFAULT_LR = 0.01
DEFAULT_ITERATIONS = 500
DEFAULT_LOG_EVERY = 50


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transcript:
    actions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if not self.actions:
            raise InfeasibleTranscript("transcript must contain at least one action")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Segmentation:
    """Ordered (action, length) pairs covering the whole video."""

    segments: tuple[tuple[int, int], ...]

    @property
    def num_frames(self) -> int:
        return sum(length for _, length in self.segments)

    @property
    def frame_labels(self) -> np.ndarray:
        return np.repeat(
            np.array([a for a, _ in self.segments], dtype=np.int64),
            np.array([n for _, n in self.segments], dtype=np.int64),
        )

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Segmentation":
        segments: list[tuple[int, int]] = []
        for label in labels:
            label = int(label)
            if segments and segments[-1][0] == label:
                segments[-1] = (label, segments[-1][1] + 1)
            else:
                segments.append((label, 1))
        return cls(segments=tuple(segments))

    @classmethod
    def from_entries(cls, entries: Sequence[int], transcript: "Transcript") -> "Segmentation":
        """Run-length of transcript entry indices; repeated actions stay separate segments."""
        segments: list[tuple[int, int]] = []
        previous = None
        for k in entries:
            k = int(k)
            if k == previous:
                segments[-1] = (segments[-1][0], segments[-1][1] + 1)
            else:
                segments.append((transcript.actions[k], 1))
            previous = k
        return cls(segments=tuple(segments))


@dataclass(frozen=True)
class ClassifierHead:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.ndim(self.W) != 2 or np.shape(self.b) != (np.shape(self.W)[0],):
            raise ShapeMismatch(f"head W {np.shape(self.W)} and b {np.shape(self.b)} disagree")

    @property
    def num_classes(self) -> int:
        return int(self.W.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ClassifierHead":
        return replace(self, W=np.asarray(tensors["W"], dtype=np.float64), b=np.asarray(tensors["b"], dtype=np.float64))

    @classmethod
    def init(cls, num_classes: int, input_dim: int, seed=0) -> "ClassifierHead":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(input_dim)
        return cls(
            W=rng.uniform(-bound, bound, size=(num_classes, input_dim)),
            b=rng.uniform(-bound, bound, size=num_classes),
        )


@dataclass
class VideoSample:
    video_id: str
    features: np.ndarray
    transcript: Transcript
    poses: Sequence[Optional[RawPose]] = ()
    normalized_poses: Sequence[Optional[NormalizedPose]] = ()
    degenerate_frames: tuple[int, ...] = ()
    ground_truth: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


class HeadSource(str, Enum):
    PROJECTION = "projection"
    FEATURE = "feature"
    # reference variants that read the pose stream at inference
    POSE = "pose"
    FUSION = "fusion"

    @property
    def reads_poses(self) -> bool:
        return self in (HeadSource.POSE, HeadSource.FUSION)


class DecodeMode(str, Enum):
    OFFLINE = "offline"
    ONLINE = "online"


@dataclass(frozen=True)
class SegmentationModel:
    encoder: EncoderParams
    projection: ProjectionParams
    head: ClassifierHead
    head_source: HeadSource = HeadSource.PROJECTION

    def head_inputs(
        self,
        features: np.ndarray,
        poses: Optional[Sequence[Optional[NormalizedPose]]] = None,
    ) -> np.ndarray:
        """What the classifier head reads; ``poses`` is only consulted by pose-reading heads."""
        return _head_forward(self, features, poses)[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, part in (("encoder", self.encoder), ("projection", self.projection), ("head", self.head)):
            for name, arr in part.tensors().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "SegmentationModel":
        def part(prefix):
            return {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

        return replace(
            self,
            encoder=self.encoder.with_tensors(part("encoder")),
            projection=self.projection.with_tensors(part("projection")),
            head=self.head.with_tensors(part("head")),
        )


@dataclass(frozen=True)
class TrainConfig:
    mining: str = "pose"  # "none", "vanilla" or "pose"
    delta: float = 0.15
    tau: float = 0.07
    lr: float = DEFAULT_LR
    iterations: int = DEFAULT_ITERATIONS
    seed: int = 0
    con_weight: float = 1.0
    hidden: int = DEFAULT_HIDDEN
    embed_dim: int = DEFAULT_EMBED_DIM
    dropout: float = DEFAULT_DROPOUT
    head_source: str = HeadSource.PROJECTION.value
    log_every: int = DEFAULT_LOG_EVERY

    def __post_init__(self):
        if self.mining not in ("none", "vanilla", "pose"):
            raise ConfigError(f"unknown mining strategy {self.mining!r}")
        if self.lr < 0 or self.iterations < 0:
            raise ConfigError("lr and iterations must be non-negative")
        if self.hidden <= 0 or self.hidden % 2 or self.embed_dim <= 0:
            raise ConfigError(f"hidden must be a positive even width and embed_dim positive, got {self.hidden}/{self.embed_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.con_weight < 0:
            raise ConfigError(f"con_weight must be non-negative, got {self.con_weight}")
        if self.head_source not in {h.value for h in HeadSource}:
            raise ConfigError(f"unknown head source {self.head_source!r}")
        if self.mining != "none":
            self.mining_config()

    @property
    def pose_supervision(self) -> bool:
        return self.mining != "none"

    def mining_config(self) -> MiningConfig:
        strategy = MiningStrategy.VANILLA if self.mining == "vanilla" else MiningStrategy.POSE_SUPERVISED
        return MiningConfig(strategy=strategy, delta=self.delta, tau=self.tau)


# ---------------------------------------------------------------------------
# Frame classifier
# ---------------------------------------------------------------------------

def frame_log_probs(head: ClassifierHead, embeddings: np.ndarray) -> np.ndarray:
    """(T, D) embeddings -> (T, C) per-frame log-probabilities."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[1] != head.W.shape[1]:
        raise ShapeMismatch(f"embeddings have {x.shape[1]} dims, head expects {head.W.shape[1]}")
    return log_softmax(x @ head.W.T + head.b, axis=1)


def frame_log_probs_backward(
    head: ClassifierHead,
    embeddings: np.ndarray,
    log_probs: np.ndarray,
    grad_log_probs: np.ndarray,
) -> dict[str, np.ndarray]:
    d_logits = grad_log_probs - softmax(log_probs, axis=1) * grad_log_probs.sum(axis=1, keepdims=True)
    return {"W": d_logits.T @ embeddings, "b": d_logits.sum(axis=0), "input": d_logits @ head.W}


@dataclass
class _PoseTrack:
    embeddings: np.ndarray
    valid: list[int]
    cache: object = None


def _encode_track(
    encoder: EncoderParams,
    poses: Optional[Sequence[Optional[NormalizedPose]]],
    num_frames: int,
) -> _PoseTrack:
    """Dropout-free pose embeddings per frame; frames without a pose read as zeros."""
    if poses is None:
        raise ConfigError("this head reads the pose stream but no poses were given")
    if len(poses) != num_frames:
        raise ShapeMismatch(f"{len(poses)} poses for {num_frames} frames")
    valid = [i for i, p in enumerate(poses) if p is not None]
    out = np.zeros((num_frames, encoder.embed_dim))
    cache = None
    if valid:
        emb, cache = encode_poses(encoder, np.stack([poses[i].flatten() for i in valid]))
        out[valid] = emb
    return _PoseTrack(out, valid, cache)


def _head_forward(
    model: SegmentationModel,
    features: np.ndarray,
    poses: Optional[Sequence[Optional[NormalizedPose]]],
) -> tuple[np.ndarray, Optional[_PoseTrack]]:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    source = model.head_source
    if source is HeadSource.FEATURE:
        return x, None
    if source is HeadSource.PROJECTION:
        return project_features(model.projection, x), None
    track = _encode_track(model.encoder, poses, x.shape[0])
    if source is HeadSource.POSE:
        return track.embeddings, track
    return np.hstack([project_features(model.projection, x), track.embeddings]), track


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def _emissions(log_probs: np.ndarray, transcript: Transcript) -> np.ndarray:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeMismatch(f"log_probs must be (T, C), got {lp.shape}")
    if max(transcript.actions) >= lp.shape[1] or min(transcript.actions) < 0:
        raise ShapeMismatch(f"transcript uses actions outside [0, {lp.shape[1]})")
    return lp[:, list(transcript.actions)]


def align_offline(log_probs: np.ndarray, transcript: Transcript) -> tuple[Segmentation, float]:
    """Best monotonic assignment of all frames to the transcript, each entry >= 1 frame.

    ``score[t, k]`` is the best sum for frames 0..t with frame t in entry k.
    O(T n) time and memory.
    """
    emit = _emissions(log_probs, transcript)
    t_len, n = emit.shape
    if n > t_len:
        raise InfeasibleTranscript(f"transcript of {n} actions cannot fit {t_len} frames")

    score = np.full((t_len, n), -np.inf)
    advanced = np.zeros((t_len, n), dtype=bool)
    score[0, 0] = emit[0, 0]
    for t in range(1, t_len):
        stay = score[t - 1]
        move = np.concatenate(([-np.inf], score[t - 1, :-1]))
        advanced[t] = move >= stay
        score[t] = emit[t] + np.where(advanced[t], move, stay)

    best = float(score[-1, -1])
    if not np.isfinite(best):
        raise InfeasibleTranscript("no alignment with finite score exists")

    entries = np.empty(t_len, dtype=np.int64)
    k = n - 1
    for t in range(t_len - 1, -1, -1):
        entries[t] = k
        if t > 0 and advanced[t, k]:
            k -= 1
    return Segmentation.from_entries(entries, transcript), best


class OnlineDecoder:
    """Causal decoder: each pushed frame is labeled once and never revised.

    Keeps the prefix-DP row over transcript entries; any non-empty prefix of
    the transcript may be consumed by the frames seen so far.
    """

    def __init__(self, transcript: Transcript):
        self.transcript = transcript
        self._score: Optional[np.ndarray] = None
        self.committed: list[int] = []
        self.entries: list[int] = []

    def push(self, log_prob_row: np.ndarray) -> int:
        emit = _emissions(np.atleast_2d(log_prob_row), self.transcript)[0]
        if self._score is None:
            score = np.full(len(self.transcript), -np.inf)
            score[0] = emit[0]
        else:
            move = np.concatenate(([-np.inf], self._score[:-1]))
            score = emit + np.maximum(self._score, move)
        if not np.isfinite(score).any():
            raise InfeasibleTranscript(f"no prefix alignment with finite score at frame {len(self.committed)}")
        self._score = score

        # argmax picks the smallest entry on ties (the later boundary)
        entry = int(np.argmax(score))
        label = self.transcript.actions[entry]
        self.entries.append(entry)
        self.committed.append(label)
        return label


def decode_online(log_prob_stream: Iterable[np.ndarray], transcript: Transcript) -> list[int]:
    decoder = OnlineDecoder(transcript)
    for row in log_prob_stream:
        decoder.push(row)
    return decoder.committed


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def segmentation_loss(log_probs: np.ndarray, alignment: Segmentation) -> tuple[float, np.ndarray]:
    """Mean negative log-probability of the pseudo labels and its gradient."""
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = alignment.frame_labels
    if lp.ndim != 2 or lp.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"alignment covers {labels.shape[0]} frames, log_probs has shape {lp.shape}")
    if labels.max() >= lp.shape[1]:
        raise ShapeMismatch(f"pseudo label {labels.max()} outside {lp.shape[1]} classes")

    t = lp.shape[0]
    rows = np.arange(t)
    loss = -float(lp[rows, labels].sum()) / t
    grad = np.zeros_like(lp)
    grad[rows, labels] = -1.0 / t
    return loss, grad


def _zero_grads(model: SegmentationModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.tensors().items()}


def joint_loss(
    model: SegmentationModel,
    video: VideoSample,
    alignment: Segmentation,
    config: TrainConfig,
    train_seed: int = 0,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Joint objective for one video with the pseudo labels held fixed.

    Gradients are keyed like ``SegmentationModel.tensors()``.
    """
    grads = _zero_grads(model)

    head_in, track = _head_forward(model, video.features, video.normalized_poses)
    log_probs = frame_log_probs(model.head, head_in)
    l_segment, d_lp = segmentation_loss(log_probs, alignment)
    head_grads = frame_log_probs_backward(model.head, head_in, log_probs, d_lp)
    grads["head.W"] += head_grads["W"]
    grads["head.b"] += head_grads["b"]

    d_in = head_grads["input"]
    d_proj = d_pose = None
    if model.head_source is HeadSource.PROJECTION:
        d_proj = d_in
    elif model.head_source is HeadSource.POSE:
        d_pose = d_in
    elif model.head_source is HeadSource.FUSION:
        split = model.projection.embed_dim
        d_proj, d_pose = d_in[:, :split], d_in[:, split:]
    if d_proj is not None:
        proj = rgb_project_backward(model.projection, video.features, d_proj)
        grads["projection.W"] += proj["W"]
        grads["projection.b"] += proj["b"]
    if d_pose is not None and track.valid:
        enc = pose_encoder_backward(model.encoder, track.cache, d_pose[track.valid])
        enc.pop("input")
        for name, g in enc.items():
            grads[f"encoder.{name}"] += g

    l_i2p = l_p2i = 0.0
    if config.pose_supervision and config.con_weight:
        con, con_grads = embed_and_contrast(
            model.encoder,
            model.projection,
            video.normalized_poses,
            video.features,
            config.mining_config(),
            train_seed=train_seed,
        )
        w = config.con_weight
        l_i2p, l_p2i = w * con.l_i2p, w * con.l_p2i
        for prefix in ("encoder", "projection"):
            for name, g in con_grads[prefix].items():
                grads[f"{prefix}.{name}"] += w * g

    return LossReport.combine(l_i2p, l_p2i, l_segment), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def init_model(
    num_keypoints: int,
    feature_dim: int,
    num_classes: int,
    config: TrainConfig,
) -> SegmentationModel:
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    head_source = HeadSource(config.head_source)
    head_dim = {
        HeadSource.FEATURE: feature_dim,
        HeadSource.FUSION: 2 * config.embed_dim,
    }.get(head_source, config.embed_dim)
    return SegmentationModel(
        encoder=EncoderParams.init(
            num_keypoints=num_keypoints,
            hidden=config.hidden,
            embed_dim=config.embed_dim,
            dropout_rate=config.dropout,
            seed=np.random.default_rng(seeds[0]),
        ),
        projection=ProjectionParams.init(feature_dim, config.embed_dim, seed=np.random.default_rng(seeds[1])),
        head=ClassifierHead.init(num_classes, head_dim, seed=np.random.default_rng(seeds[2])),
        head_source=head_source,
    )


def _check_dataset(videos: Sequence[VideoSample], model: SegmentationModel) -> None:
    if not videos:
        raise ConfigError("training set is empty")
    feature_dim = model.projection.feature_dim
    num_keypoints = model.encoder.input_dim // 2
    for video in videos:
        if video.features.ndim != 2 or video.features.shape[1] != feature_dim:
            raise ConfigError(f"{video.video_id}: features {video.features.shape} do not have F={feature_dim}")
        if max(video.transcript.actions) >= model.head.num_classes:
            raise ConfigError(f"{video.video_id}: transcript uses a class outside C={model.head.num_classes}")
        if len(video.transcript) > video.num_frames:
            raise ConfigError(f"{video.video_id}: transcript longer than the video")
        for pose in video.normalized_poses:
            if pose is not None and pose.num_keypoints != num_keypoints:
                raise ConfigError(f"{video.video_id}: pose has {pose.num_keypoints} keypoints, expected {num_keypoints}")


@dataclass
class TrainResult:
    model: SegmentationModel
    initial_model: SegmentationModel
    reports: list[dict] = field(default_factory=list)


def train(
    videos: Sequence[VideoSample],
    config: TrainConfig,
    model: Optional[SegmentationModel] = None,
    num_classes: Optional[int] = None,
    on_report: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Plain SGD on L_final, one video per iteration, realigning every step.

    Each report is a dict with ``iteration``, ``video_id`` and the LossReport fields.

    Raises:
        ConfigError: inconsistent dataset shapes.
        NumericDivergence: a non-finite loss.
    """
    if model is None:
        if not videos:
            raise ConfigError("training set is empty")
        first = videos[0]
        num_keypoints = next(
            (p.num_keypoints for v in videos for p in v.normalized_poses if p is not None), 17
        )
        if num_classes is None:
            num_classes = 1 + max(max(v.transcript.actions) for v in videos)
        model = init_model(num_keypoints, first.features.shape[1], num_classes, config)
    _check_dataset(videos, model)

    initial = model
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    reports: list[dict] = []

    logger.info(
        "Training %d iterations on %d videos (mining=%s, delta=%g, tau=%g, lr=%g)",
        config.iterations, len(videos), config.mining, config.delta, config.tau, config.lr,
    )

    for iteration in range(1, config.iterations + 1):
        if not order:
            order = rng.permutation(len(videos)).tolist()
        video = videos[order.pop(0)]
        train_seed = int(rng.integers(2**31))

        log_probs = frame_log_probs(model.head, model.head_inputs(video.features, video.normalized_poses))
        alignment, _ = align_offline(log_probs, video.transcript)
        report, grads = joint_loss(model, video, alignment, config, train_seed)

        if not np.isfinite(report.l_final):
            logger.error("Loss diverged at iteration %d (%s)", iteration, video.video_id)
            raise NumericDivergence(iteration, report.l_final)

        tensors = model.tensors()
        model = model.with_tensors({name: tensors[name] - config.lr * grads[name] for name in tensors})

        record = {"iteration": iteration, "video_id": video.video_id, **report.as_dict()}
        reports.append(record)
        if on_report is not None:
            on_report(record)
        if config.log_every and iteration % config.log_every == 0:
            logger.info(
                "iter %d: l_final=%.4f l_con=%.4f l_segment=%.4f",
                iteration, report.l_final, report.l_con, report.l_segment,
            )

    return TrainResult(model=model, initial_model=initial, reports=reports)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def decode(
    model: SegmentationModel,
    features: np.ndarray,
    transcript: Transcript,
    mode: DecodeMode = DecodeMode.OFFLINE,
    poses: Optional[Sequence[Optional[NormalizedPose]]] = None,
) -> Segmentation:
    """Segment from RGB features alone.

    ``poses`` is read only by the ``pose`` and ``fusion`` reference heads; the
    projection and feature heads never consult the pose stream. Online decoding
    never revises a committed frame, so its segments may revisit an earlier
    transcript entry (entries 0, 1, 0).
    """
    log_probs = frame_log_probs(model.head, model.head_inputs(features, poses))
    if DecodeMode(mode) is DecodeMode.ONLINE:
        decoder = OnlineDecoder(transcript)
        for row in log_probs:
            decoder.push(row)
        return Segmentation.from_entries(decoder.entries, transcript)
    segmentation, _ = align_offline(log_probs, transcript)
    return segmentation


def infer(model: SegmentationModel, video: VideoSample, mode: DecodeMode = DecodeMode.OFFLINE) -> Segmentation:
    poses = video.normalized_poses if model.head_source.reads_poses else None
    return decode(model, video.features, video.transcript, mode, poses)
