"""
Embedding networks -- the pose encoder, the RGB projection and their exact
reverse-mode gradients, plus the checkpoint container both are saved in.

Pose encoder, per frame (vectors are rows, layers act on the last axis):

    z1 = dropout(relu(layernorm(W1 p + b1)))
    z2 = dropout(relu(layernorm(W2 z1 + b2)))
    P  = Gamma(maxpool(z2 + z1))

``maxpool`` is kernel 2 / stride 2 over the feature axis, so Gamma maps
h/2 -> D. All arithmetic is float64; checkpoints store float32.
"""

import json
import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import ClassVar, Optional, Union

import numpy as np

from posecon.errors import IoError, ParseError, ShapeMismatch, StaleCache
from posecon.pose_geometry import NormalizedPose

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------

DEFAULT_HIDDEN = 128
DEFAULT_EMBED_DIM = 64
DEFAULT_DROPOUT = 0.1
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"PCKP"
CHECKPOINT_VERSION = "1"

SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

class Modality(str, Enum):
    RGB = "rgb"
    POSE = "pose"


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    modality: Modality
    frame_index: int = 0


@dataclass(frozen=True)
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    proj_gamma: np.ndarray
    dropout_rate: float = DEFAULT_DROPOUT

    TENSORS: ClassVar[tuple[str, ...]] = (
        "W1", "b1", "W2", "b2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        "proj_gamma",
    )

    def __post_init__(self):
        if np.ndim(self.W1) != 2:
            raise ShapeMismatch(f"W1 must be a matrix, got shape {np.shape(self.W1)}")
        h = np.shape(self.W1)[0]
        expected = {
            "b1": (h,), "W2": (h, h), "b2": (h,),
            "ln1_gain": (h,), "ln1_bias": (h,), "ln2_gain": (h,), "ln2_bias": (h,),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeMismatch(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if h % 2:
            raise ShapeMismatch(f"hidden width must be even for pooling, got {h}")
        if np.ndim(self.proj_gamma) != 2 or np.shape(self.proj_gamma)[1] != h // 2:
            raise ShapeMismatch(f"proj_gamma must be (D, {h // 2}), got {np.shape(self.proj_gamma)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeMismatch(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.W1.shape[1])

    @property
    def embed_dim(self) -> int:
        return int(self.proj_gamma.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "EncoderParams":
        return replace(self, **{name: np.asarray(tensors[name], dtype=np.float64) for name in self.TENSORS})

    @classmethod
    def init(
        cls,
        num_keypoints: int = 17,
        hidden: int = DEFAULT_HIDDEN,
        embed_dim: int = DEFAULT_EMBED_DIM,
        dropout_rate: float = DEFAULT_DROPOUT,
        seed: SeedLike = 0,
    ) -> "EncoderParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit layer-norm gains."""
        rng = _rng(seed)
        d_in = 2 * num_keypoints
        return cls(
            W1=_uniform(rng, (hidden, d_in), d_in),
            b1=_uniform(rng, (hidden,), d_in),
            W2=_uniform(rng, (hidden, hidden), hidden),
            b2=_uniform(rng, (hidden,), hidden),
            ln1_gain=np.ones(hidden),
            ln1_bias=np.zeros(hidden),
            ln2_gain=np.ones(hidden),
            ln2_bias=np.zeros(hidden),
            proj_gamma=_uniform(rng, (embed_dim, hidden // 2), hidden // 2),
            dropout_rate=dropout_rate,
        )

    @classmethod
    def zeros(cls, num_keypoints: int, hidden: int, embed_dim: int, dropout_rate: float = 0.0) -> "EncoderParams":
        d_in = 2 * num_keypoints
        return cls(
            W1=np.zeros((hidden, d_in)), b1=np.zeros(hidden),
            W2=np.zeros((hidden, hidden)), b2=np.zeros(hidden),
            ln1_gain=np.zeros(hidden), ln1_bias=np.zeros(hidden),
            ln2_gain=np.zeros(hidden), ln2_bias=np.zeros(hidden),
            proj_gamma=np.zeros((embed_dim, hidden // 2)),
            dropout_rate=dropout_rate,
        )


@dataclass(frozen=True)
class ProjectionParams:
    """Single linear layer mapping an F-dim frame feature into the joint space."""

    W: np.ndarray
    b: np.ndarray

    TENSORS: ClassVar[tuple[str, ...]] = ("W", "b")

    def __post_init__(self):
        if np.ndim(self.W) != 2 or np.shape(self.b) != (np.shape(self.W)[0],):
            raise ShapeMismatch(f"projection W {np.shape(self.W)} and b {np.shape(self.b)} disagree")

    @property
    def feature_dim(self) -> int:
        return int(self.W.shape[1])

    @property
    def embed_dim(self) -> int:
        return int(self.W.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ProjectionParams":
        return replace(self, W=np.asarray(tensors["W"], dtype=np.float64), b=np.asarray(tensors["b"], dtype=np.float64))

    @classmethod
    def init(cls, feature_dim: int, embed_dim: int = DEFAULT_EMBED_DIM, seed: SeedLike = 0) -> "ProjectionParams":
        rng = _rng(seed)
        return cls(
            W=_uniform(rng, (embed_dim, feature_dim), feature_dim),
            b=_uniform(rng, (embed_dim,), feature_dim),
        )


@dataclass(frozen=True)
class ActivationCache:
    inputs: np.ndarray
    xhat1: np.ndarray
    inv_std1: np.ndarray
    n1: np.ndarray
    mask1: np.ndarray
    z1: np.ndarray
    xhat2: np.ndarray
    inv_std2: np.ndarray
    n2: np.ndarray
    mask2: np.ndarray
    z2: np.ndarray
    pooled: np.ndarray
    pool_index: np.ndarray


# ---------------------------------------------------------------------------
# Layer helpers
# ---------------------------------------------------------------------------

def _layer_norm(a, gain, bias):
    mean = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (a - mean) * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layer_norm_backward(dn, xhat, inv_std, gain):
    dxhat = dn * gain
    dgain = (dn * xhat).sum(axis=0)
    dbias = dn.sum(axis=0)
    da = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return da, dgain, dbias


def _dropout_masks(shape, rate, train_mode, rng_seed):
    if not train_mode or rate == 0.0:
        ones = np.ones(shape)
        return ones, ones
    rng = np.random.default_rng(rng_seed)
    keep = 1.0 - rate
    mask1 = (rng.random(shape) < keep) / keep
    mask2 = (rng.random(shape) < keep) / keep
    return mask1, mask2


# ---------------------------------------------------------------------------
# Pose encoder
# ---------------------------------------------------------------------------

def encode_poses(
    params: EncoderParams,
    inputs: np.ndarray,
    train_mode: bool = False,
    rng_seed: int = 0,
) -> tuple[np.ndarray, ActivationCache]:
    """Run the pose encoder on T flattened poses at once.

    Args:
        inputs: (T, 2K) array of flattened normalized poses.

    Returns:
        (T, D) pose embeddings and the cache needed by the backward pass.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ShapeMismatch(f"pose vector has {x.shape[1]} entries, encoder expects {params.input_dim}")

    t, h = x.shape[0], params.hidden
    mask1, mask2 = _dropout_masks((t, h), params.dropout_rate, train_mode, rng_seed)

    n1, xhat1, inv_std1 = _layer_norm(x @ params.W1.T + params.b1, params.ln1_gain, params.ln1_bias)
    z1 = np.maximum(n1, 0.0) * mask1

    n2, xhat2, inv_std2 = _layer_norm(z1 @ params.W2.T + params.b2, params.ln2_gain, params.ln2_bias)
    z2 = np.maximum(n2, 0.0) * mask2

    pairs = (z1 + z2).reshape(t, h // 2, 2)
    pool_index = pairs.argmax(axis=2)
    pooled = np.take_along_axis(pairs, pool_index[:, :, None], axis=2)[:, :, 0]

    out = pooled @ params.proj_gamma.T
    cache = ActivationCache(
        inputs=x,
        xhat1=xhat1, inv_std1=inv_std1, n1=n1, mask1=mask1, z1=z1,
        xhat2=xhat2, inv_std2=inv_std2, n2=n2, mask2=mask2, z2=z2,
        pooled=pooled, pool_index=pool_index,
    )
    return out, cache


def pose_encoder_forward(
    params: EncoderParams,
    pose: NormalizedPose,
    train_mode: bool = False,
    rng_seed: int = 0,
    frame_index: int = 0,
) -> tuple[Embedding, ActivationCache]:
    """Embed a single normalized pose."""
    out, cache = encode_poses(params, pose.flatten()[None, :], train_mode, rng_seed)
    return Embedding(vector=out[0], modality=Modality.POSE, frame_index=frame_index), cache


def pose_encoder_backward(
    params: EncoderParams,
    cache: ActivationCache,
    grad_out: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of ``sum(grad_out * P)`` w.r.t. every encoder tensor and the input.

    The dropout masks stored in ``cache`` are replayed, never resampled.
    The returned dict is keyed by tensor name plus ``"input"``.
    """
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    t = cache.inputs.shape[0]
    if (
        cache.inputs.shape[1] != params.input_dim
        or cache.z1.shape[1] != params.hidden
        or cache.pooled.shape[1] != params.proj_gamma.shape[1]
    ):
        raise StaleCache("activation cache was produced by differently shaped parameters")
    if g.shape != (t, params.embed_dim):
        raise StaleCache(f"grad_out shape {g.shape} does not match cached batch ({t}, {params.embed_dim})")

    h = params.hidden
    d_gamma = g.T @ cache.pooled
    d_pooled = g @ params.proj_gamma

    d_pairs = np.zeros((t, h // 2, 2))
    np.put_along_axis(d_pairs, cache.pool_index[:, :, None], d_pooled[:, :, None], axis=2)
    d_sum = d_pairs.reshape(t, h)

    # layer 2
    dn2 = d_sum * cache.mask2 * (cache.n2 > 0)
    da2, d_ln2_gain, d_ln2_bias = _layer_norm_backward(dn2, cache.xhat2, cache.inv_std2, params.ln2_gain)
    d_W2 = da2.T @ cache.z1
    d_b2 = da2.sum(axis=0)

    # residual joins here
    dz1 = d_sum + da2 @ params.W2

    # layer 1
    dn1 = dz1 * cache.mask1 * (cache.n1 > 0)
    da1, d_ln1_gain, d_ln1_bias = _layer_norm_backward(dn1, cache.xhat1, cache.inv_std1, params.ln1_gain)
    d_W1 = da1.T @ cache.inputs
    d_b1 = da1.sum(axis=0)

    return {
        "W1": d_W1, "b1": d_b1, "W2": d_W2, "b2": d_b2,
        "ln1_gain": d_ln1_gain, "ln1_bias": d_ln1_bias,
        "ln2_gain": d_ln2_gain, "ln2_bias": d_ln2_bias,
        "proj_gamma": d_gamma,
        "input": da1 @ params.W1,
    }


# ---------------------------------------------------------------------------
# RGB projection
# ---------------------------------------------------------------------------

def project_features(params: ProjectionParams, features: np.ndarray) -> np.ndarray:
    """(T, F) features -> (T, D) RGB embeddings."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != params.feature_dim:
        raise ShapeMismatch(f"feature has {x.shape[1]} entries, projection expects {params.feature_dim}")
    return x @ params.W.T + params.b


def rgb_project(params: ProjectionParams, feature: np.ndarray, frame_index: int = 0) -> Embedding:
    vec = np.asarray(feature, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeMismatch(f"expected a single feature vector, got shape {vec.shape}")
    return Embedding(vector=project_features(params, vec[None, :])[0], modality=Modality.RGB, frame_index=frame_index)


def rgb_project_backward(
    params: ProjectionParams,
    features: np.ndarray,
    grad_out: np.ndarray,
) -> dict[str, np.ndarray]:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if x.shape[1] != params.feature_dim or g.shape != (x.shape[0], params.embed_dim):
        raise ShapeMismatch(f"features {x.shape} / grad_out {g.shape} do not fit projection {params.W.shape}")
    return {"W": g.T @ x, "b": g.sum(axis=0), "input": g @ params.W}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout: magic (4 bytes) | header length (uint32 LE) | JSON header | float32 LE data.
# The header lists tensors in storage order with their shapes.

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tensors": [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.asarray(arr, dtype="<f4").tobytes(order="C") for arr in tensors.values())

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            f.write(payload)
    except OSError as exc:
        logger.error("Failed to write checkpoint %s: %s", path, exc)
        raise IoError(path, f"cannot write checkpoint: {exc}") from exc

    logger.debug("Saved %d tensors to %s", len(tensors), path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as float64 tensors plus its ``meta`` block."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(path, f"cannot read checkpoint: {exc}") from exc

    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
        raise ParseError(path, "not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(path, f"unsupported checkpoint version {header.get('format_version')!r}")

    data = np.frombuffer(raw, dtype="<f4", offset=8 + header_len)
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        if offset + size > data.size:
            raise ParseError(path, f"tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = data[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != data.size:
        raise ParseError(path, f"{data.size - offset} trailing values after last tensor")
    return tensors, header.get("meta", {})

