"""
Dataset I/O and the synthetic instructional-video generator.

On-disk layout of a dataset directory:

    manifest.json            format_version, K, F, C, classes, head_index, videos
    features/<id>.feat       magic, version, T, F (uint32 LE) then T*F float32 LE
    poses/<id>.csv           frame_index,x0,y0,...; empty cells for a missing pose
    transcripts/<id>.txt     one class name per line
    labels/<id>.txt          one class name per frame

Files store float32; everything is loaded as float64.
"""

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from posecon.errors import ConfigError, DimensionError, IoError, ParseError
from posecon.pose_geometry import RawPose, normalize_sequence
from posecon.weak_segmentation import Transcript, VideoSample

logger = logging.getLogger(__name__)

# ---------- CONFIG ----------
FORMAT_VERSION = "1"
FEATURE_MAGIC = b"PCFT"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.json"
_FEATURE_HEADER = struct.Struct("<4sIII")
# ----------------------------


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class VideoEntry:
    video_id: str
    features: str
    poses: str
    transcript: str
    labels: Optional[str] = None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    videos: list[VideoEntry]
    num_keypoints: int
    feature_dim: int
    num_classes: int
    classes: list[str]
    head_index: int = 0
    format_version: str = FORMAT_VERSION

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "K": self.num_keypoints,
            "F": self.feature_dim,
            "C": self.num_classes,
            "classes": list(self.classes),
            "head_index": self.head_index,
            "videos": [asdict(v) for v in self.videos],
        }


def write_manifest(manifest: DatasetManifest) -> Path:
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
    _write_bytes(manifest.path, text.encode("utf-8"))
    return manifest.path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(path, f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"invalid JSON: {exc.msg}", line=exc.lineno) from exc

    if data.get("format_version") != FORMAT_VERSION:
        raise ParseError(path, f"unsupported format_version {data.get('format_version')!r}")
    try:
        known = set(VideoEntry.__dataclass_fields__)
        videos = [VideoEntry(**{k: v for k, v in entry.items() if k in known}) for entry in data["videos"]]
        manifest = DatasetManifest(
            root=path.parent,
            videos=videos,
            num_keypoints=int(data["K"]),
            feature_dim=int(data["F"]),
            num_classes=int(data["C"]),
            classes=[str(c) for c in data["classes"]],
            head_index=int(data.get("head_index", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"malformed manifest: {exc}") from exc

    if len(manifest.classes) != manifest.num_classes:
        raise DimensionError(f"{path}: C={manifest.num_classes} but {len(manifest.classes)} class names")
    return manifest


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        logger.error("Failed to write %s: %s", path, exc)
        raise IoError(path, f"cannot write: {exc}") from exc


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise ParseError(path, f"cannot read file: {exc}") from exc


def encode_features(features: np.ndarray) -> bytes:
    x = np.asarray(features, dtype="<f4")
    if x.ndim != 2:
        raise DimensionError(f"features must be (T, F), got {x.shape}")
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, x.shape[0], x.shape[1]) + x.tobytes(order="C")


def decode_features(payload: bytes, path="<bytes>") -> np.ndarray:
    if len(payload) < _FEATURE_HEADER.size:
        raise ParseError(path, "truncated feature header")
    magic, version, t, f = _FEATURE_HEADER.unpack_from(payload)
    if magic != FEATURE_MAGIC:
        raise ParseError(path, "not a feature file (bad magic)")
    if version != FEATURE_VERSION:
        raise ParseError(path, f"unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 4 * t * f
    if len(payload) != expected:
        raise ParseError(path, f"expected {expected} bytes for T={t}, F={f}, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", offset=_FEATURE_HEADER.size)
    if not np.isfinite(data).all():
        raise ParseError(path, "feature matrix holds non-finite values")
    return data.reshape(t, f).astype(np.float64)


def write_features(path, features: np.ndarray) -> None:
    _write_bytes(Path(path), encode_features(features))


def read_features(path) -> np.ndarray:
    path = Path(path)
    return decode_features(_read_bytes(path), path)


def _fmt(value: float) -> str:
    return format(float(np.float32(value)), ".9g")


def encode_poses(poses: Sequence[Optional[np.ndarray]], num_keypoints: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["frame_index"]
    for k in range(num_keypoints):
        header += [f"x{k}", f"y{k}"]
    writer.writerow(header)
    for t, kp in enumerate(poses):
        if kp is None:
            writer.writerow([t] + [""] * (2 * num_keypoints))
        else:
            writer.writerow([t] + [_fmt(v) for v in np.asarray(kp).reshape(-1)])
    return buf.getvalue()


def decode_poses(text: str, num_keypoints: int, path="<text>") -> list[Optional[np.ndarray]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError(path, "empty pose file", line=1)
    width = 1 + 2 * num_keypoints
    if len(rows[0]) != width or rows[0][0] != "frame_index":
        raise ParseError(path, f"header must have frame_index plus {2 * num_keypoints} coordinate columns", line=1)

    poses: list[Optional[np.ndarray]] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(path, f"expected {width} cells, found {len(row)}", line=line_no)
        try:
            frame_index = int(row[0])
        except ValueError:
            raise ParseError(path, f"bad frame index {row[0]!r}", line=line_no) from None
        if frame_index != len(poses):
            raise ParseError(path, f"frame index {frame_index} out of sequence", line=line_no)
        cells = row[1:]
        if all(c == "" for c in cells):
            poses.append(None)
            continue
        try:
            coords = np.array([float(c) for c in cells], dtype=np.float64)
        except ValueError:
            raise ParseError(path, "pose row mixes numbers and empty or invalid cells", line=line_no) from None
        if not np.isfinite(coords).all():
            raise ParseError(path, "pose row holds a non-finite coordinate", line=line_no)
        poses.append(coords.reshape(num_keypoints, 2))
    return poses


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, f"cannot read file: {exc}") from exc


def _read_names(path: Path, class_index: dict[str, int]) -> list[int]:
    ids = []
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        name = line.strip()
        if not name:
            continue
        if name not in class_index:
            raise ParseError(path, f"unknown class name {name!r}", line=line_no)
        ids.append(class_index[name])
    return ids


def _names_text(ids: Sequence[int], classes: Sequence[str]) -> str:
    return "".join(f"{classes[i]}\n" for i in ids)


def write_labels(path, labels: Sequence[int], classes: Sequence[str]) -> None:
    _write_bytes(Path(path), _names_text(labels, classes).encode("utf-8"))


def read_labels(path, classes: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(classes)}
    return np.array(_read_names(Path(path), index), dtype=np.int64)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    manifest: DatasetManifest
    videos: list[VideoSample]

    def split(self, name: str) -> list[VideoSample]:
        wanted = {v.video_id for v in self.manifest.videos if v.split == name}
        return [v for v in self.videos if v.video_id in wanted]


def load_video(manifest: DatasetManifest, entry: VideoEntry) -> VideoSample:
    root = manifest.root
    class_index = {name: i for i, name in enumerate(manifest.classes)}

    features = read_features(root / entry.features)
    if features.shape[1] != manifest.feature_dim:
        raise DimensionError(f"{entry.video_id}: features have F={features.shape[1]}, manifest says {manifest.feature_dim}")
    t = features.shape[0]

    pose_path = root / entry.poses
    keypoints = decode_poses(_read_text(pose_path), manifest.num_keypoints, pose_path)
    if len(keypoints) != t:
        raise DimensionError(f"{entry.video_id}: {len(keypoints)} pose rows but {t} feature rows")

    actions = _read_names(root / entry.transcript, class_index)
    if not actions:
        raise ParseError(root / entry.transcript, "empty transcript")
    if len(actions) > t:
        raise DimensionError(f"{entry.video_id}: transcript of {len(actions)} actions exceeds {t} frames")

    ground_truth = None
    if entry.labels:
        ground_truth = read_labels(root / entry.labels, manifest.classes)
        if len(ground_truth) != t:
            raise DimensionError(f"{entry.video_id}: {len(ground_truth)} labels but {t} feature rows")

    raw = [None if kp is None else RawPose(kp, manifest.head_index) for kp in keypoints]
    normalized, degenerate = normalize_sequence(raw)
    if degenerate:
        logger.warning("%s: %d degenerate pose frame(s): %s", entry.video_id, len(degenerate), degenerate)

    return VideoSample(
        video_id=entry.video_id,
        features=features,
        transcript=Transcript(tuple(actions)),
        poses=raw,
        normalized_poses=normalized,
        degenerate_frames=tuple(degenerate),
        ground_truth=ground_truth,
    )


def load_dataset(manifest_path, split: Optional[str] = None) -> Dataset:
    """Parse, normalize and validate every video named by the manifest.

    Raises:
        ParseError: a referenced file is missing or malformed (names the path).
        DimensionError: per-video shapes disagree with each other or the manifest.
    """
    manifest = read_manifest(manifest_path)
    entries = [e for e in manifest.videos if split is None or e.split == split]
    videos = [load_video(manifest, entry) for entry in entries]
    logger.info("Loaded %d videos from %s", len(videos), manifest.path)
    return Dataset(manifest=manifest, videos=videos)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_train: int = 40
    num_test: int = 10
    num_classes: int = 5
    num_keypoints: int = 17
    feature_dim: int = 32
    min_actions: int = 4
    max_actions: int = 6
    mean_segment_length: int = 12
    segment_jitter: int = 4
    prototypes_per_action: int = 3
    pose_pool: int = 15
    pose_noise: float = 0.05
    feature_noise: float = 0.6
    action_signal: float = 0.4
    pose_signal: float = 1.0
    scene_rank: int = 3
    scene_noise: float = 2.0
    missing_pose_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        positive = ("num_classes", "num_keypoints", "feature_dim", "min_actions", "mean_segment_length")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_train < 0 or self.num_test < 0 or self.num_train + self.num_test == 0:
            raise ConfigError("need at least one video")
        if self.num_keypoints < 2:
            raise ConfigError("need at least 2 keypoints")
        if self.max_actions < self.min_actions:
            raise ConfigError("max_actions must be >= min_actions")
        if self.prototypes_per_action < 1 or self.pose_pool < self.prototypes_per_action:
            raise ConfigError("pose_pool must hold at least prototypes_per_action poses")
        if self.segment_jitter < 0 or self.segment_jitter >= self.mean_segment_length:
            raise ConfigError("segment_jitter must lie in [0, mean_segment_length)")
        if self.num_classes < 2 and self.max_actions > 1:
            raise ConfigError("transcripts without immediate repeats need at least 2 classes")
        if min(self.pose_noise, self.feature_noise, self.scene_noise) < 0:
            raise ConfigError("noise levels must be non-negative")
        if min(self.action_signal, self.pose_signal) < 0 or self.scene_rank < 0:
            raise ConfigError("signal scales and scene_rank must be non-negative")
        if not 0.0 <= self.missing_pose_fraction < 1.0:
            raise ConfigError("missing_pose_fraction must lie in [0, 1)")


@dataclass
class SyntheticVideo:
    video_id: str
    split: str
    transcript: list[int]
    labels: np.ndarray
    features: np.ndarray
    keypoints: list[Optional[np.ndarray]]
    prototypes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _sample_transcript(rng: np.random.Generator, config: SynthConfig) -> list[int]:
    n = int(rng.integers(config.min_actions, config.max_actions + 1))
    actions = [int(rng.integers(config.num_classes))]
    while len(actions) < n:
        choice = int(rng.integers(config.num_classes - 1))
        actions.append(choice if choice < actions[-1] else choice + 1)
    return actions


def generate_videos(config: SynthConfig) -> tuple[list[str], list[SyntheticVideo]]:
    """Build the synthetic dataset in memory; fully determined by ``config.seed``.

    Every action walks through its own ordered pose prototypes. Actions get
    disjoint prototypes while the pool lasts; a smaller pool makes the same
    pose recur inside different actions. Features are a fixed random linear
    image of the (action, prototype) one-hot code, plus a per-video scene
    offset drawn from a low-rank subspace that the pose stream never sees.
    """
    rng = np.random.default_rng(config.seed)
    k, c, ppa = config.num_keypoints, config.num_classes, config.prototypes_per_action

    skeleton = rng.normal(0.0, 1.0, size=(k, 2))
    pool = skeleton[None] + rng.normal(0.0, 0.5, size=(config.pose_pool, k, 2))
    rounds = -(-c * ppa // config.pose_pool)
    order = np.concatenate([rng.permutation(config.pose_pool) for _ in range(rounds)])
    action_protos = order[: c * ppa].reshape(c, ppa)

    code_dim = c + config.pose_pool
    mixing = rng.normal(0.0, 1.0, size=(config.feature_dim, code_dim)) / np.sqrt(config.feature_dim / 4.0)
    code_scale = np.concatenate([np.full(c, config.action_signal), np.full(config.pose_pool, config.pose_signal)])
    scene_basis = rng.normal(0.0, 1.0, size=(config.feature_dim, config.scene_rank)) / np.sqrt(config.feature_dim)

    classes = [f"action_{i:02d}" for i in range(c)]
    videos: list[SyntheticVideo] = []
    splits = ["train"] * config.num_train + ["test"] * config.num_test
    counters = {"train": 0, "test": 0}

    for split in splits:
        video_id = f"{split}_{counters[split]:03d}"
        counters[split] += 1

        transcript = _sample_transcript(rng, config)
        lengths = rng.integers(
            config.mean_segment_length - config.segment_jitter,
            config.mean_segment_length + config.segment_jitter + 1,
            size=len(transcript),
        )
        labels = np.repeat(np.array(transcript, dtype=np.int64), lengths)
        protos = np.concatenate([
            action_protos[a, (np.arange(n) * ppa) // n]
            for a, n in zip(transcript, lengths)
        ])
        t = labels.shape[0]

        codes = np.zeros((t, code_dim))
        codes[np.arange(t), labels] = 1.0
        codes[np.arange(t), c + protos] = 1.0
        scene = scene_basis @ rng.normal(0.0, config.scene_noise, size=config.scene_rank)
        features = (codes * code_scale) @ mixing.T + scene + rng.normal(0.0, config.feature_noise, size=(t, config.feature_dim))

        # per-video camera: pixel scale, offset and a small roll
        scale = rng.uniform(60.0, 140.0)
        offset = rng.uniform([160.0, 120.0], [480.0, 360.0])
        roll = rng.uniform(-0.3, 0.3)
        rot = np.array([[np.cos(roll), -np.sin(roll)], [np.sin(roll), np.cos(roll)]])
        body = pool[protos] + rng.normal(0.0, config.pose_noise, size=(t, k, 2))
        pixels = (body @ rot.T) * scale + offset

        missing = rng.random(t) < config.missing_pose_fraction
        keypoints = [None if missing[i] else pixels[i] for i in range(t)]

        videos.append(SyntheticVideo(
            video_id=video_id,
            split=split,
            transcript=transcript,
            labels=labels,
            features=features,
            keypoints=keypoints,
            prototypes=protos,
        ))
    return classes, videos


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Generate and write a synthetic dataset; returns its manifest."""
    out = Path(out_dir)
    classes, videos = generate_videos(config)

    entries: list[VideoEntry] = []
    for video in videos:
        entry = VideoEntry(
            video_id=video.video_id,
            features=f"features/{video.video_id}.feat",
            poses=f"poses/{video.video_id}.csv",
            transcript=f"transcripts/{video.video_id}.txt",
            labels=f"labels/{video.video_id}.txt",
            split=video.split,
        )
        write_features(out / entry.features, video.features)
        _write_bytes(out / entry.poses, encode_poses(video.keypoints, config.num_keypoints).encode("utf-8"))
        _write_bytes(out / entry.transcript, _names_text(video.transcript, classes).encode("utf-8"))
        write_labels(out / entry.labels, video.labels, classes)
        entries.append(entry)

    manifest = DatasetManifest(
        root=out,
        videos=entries,
        num_keypoints=config.num_keypoints,
        feature_dim=config.feature_dim,
        num_classes=config.num_classes,
        classes=classes,
        head_index=0,
    )
    write_manifest(manifest)
    logger.info("Wrote %d synthetic videos to %s", len(entries), out)
    return manifest
