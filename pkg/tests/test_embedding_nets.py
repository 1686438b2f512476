import math

import numpy as np
import pytest

from posecon.embedding_nets import (
    CHECKPOINT_MAGIC,
    LAYER_NORM_EPS,
    EncoderParams,
    Modality,
    ProjectionParams,
    encode_poses,
    load_checkpoint,
    pose_encoder_backward,
    pose_encoder_forward,
    project_features,
    rgb_project,
    rgb_project_backward,
    save_checkpoint,
)
from posecon.errors import IoError, ParseError, ShapeMismatch, StaleCache
from posecon.pose_geometry import NormalizedPose

CANONICAL = NormalizedPose(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def _random_encoder(seed, num_keypoints=2, hidden=8, embed_dim=4, dropout_rate=0.0):
    """Seeded encoder with non-trivial layer-norm gains and biases."""
    params = EncoderParams.init(num_keypoints, hidden, embed_dim, dropout_rate, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    tensors = params.tensors()
    for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
        tensors[name] = rng.uniform(0.5, 1.5, size=hidden) if "gain" in name else rng.normal(0.0, 0.3, size=hidden)
    return params.with_tensors(tensors)


# ---------- loop reference ----------

def _matvec(W, x, b):
    return [sum(W[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(b))]


def _layer_norm(a, gain, bias):
    mean = sum(a) / len(a)
    var = sum((v - mean) ** 2 for v in a) / len(a)
    return [(v - mean) / math.sqrt(var + LAYER_NORM_EPS) * g + c for v, g, c in zip(a, gain, bias)]


def _reference_encoder(params, x):
    z1 = [max(v, 0.0) for v in _layer_norm(_matvec(params.W1, x, params.b1), params.ln1_gain, params.ln1_bias)]
    z2 = [max(v, 0.0) for v in _layer_norm(_matvec(params.W2, z1, params.b2), params.ln2_gain, params.ln2_bias)]
    s = [u + v for u, v in zip(z1, z2)]
    pooled = [max(s[2 * i], s[2 * i + 1]) for i in range(len(s) // 2)]
    return _matvec(params.proj_gamma, pooled, [0.0] * params.embed_dim)


# ---------- forward ----------

def test_zero_params_give_zero_embedding():
    params = EncoderParams.zeros(num_keypoints=2, hidden=8, embed_dim=4)
    emb, _ = pose_encoder_forward(params, CANONICAL)
    np.testing.assert_array_equal(emb.vector, np.zeros(4))
    assert emb.modality is Modality.POSE


def test_zero_dropout_train_equals_eval():
    params = _random_encoder(3)
    train, _ = pose_encoder_forward(params, CANONICAL, train_mode=True, rng_seed=99)
    evald, _ = pose_encoder_forward(params, CANONICAL, train_mode=False)
    np.testing.assert_array_equal(train.vector, evald.vector)


def test_seeded_encoder_matches_loop_reference():
    params = _random_encoder(7)
    emb, _ = pose_encoder_forward(params, CANONICAL)
    expected = _reference_encoder(params, list(CANONICAL.flatten()))
    np.testing.assert_allclose(emb.vector, expected, rtol=1e-12, atol=1e-12)


def test_batched_rows_equal_single_frames():
    params = _random_encoder(8, num_keypoints=3)
    x = np.random.default_rng(8).normal(size=(5, 6))
    batch, _ = encode_poses(params, x)
    for t in range(5):
        single, _ = encode_poses(params, x[t:t + 1])
        np.testing.assert_allclose(batch[t], single[0], atol=1e-14)


def test_dropout_is_seeded_and_eval_is_deterministic():
    params = _random_encoder(4, dropout_rate=0.5)
    x = np.random.default_rng(4).normal(size=(3, 4))
    a, _ = encode_poses(params, x, train_mode=True, rng_seed=1)
    b, _ = encode_poses(params, x, train_mode=True, rng_seed=1)
    c, _ = encode_poses(params, x, train_mode=True, rng_seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)

    e1, _ = encode_poses(params, x)
    e2, _ = encode_poses(params, x, rng_seed=2)
    np.testing.assert_array_equal(e1, e2)


def test_dropout_masks_are_inverted_scaled():
    params = _random_encoder(6, dropout_rate=0.25)
    _, cache = encode_poses(params, np.ones((50, 4)), train_mode=True, rng_seed=0)
    assert set(np.unique(cache.mask1)) <= {0.0, 1.0 / 0.75}


def test_layer_norm_statistics_in_cache():
    params = _random_encoder(5, hidden=16)
    _, cache = encode_poses(params, np.random.default_rng(5).normal(size=(4, 4)))
    np.testing.assert_allclose(cache.xhat1.mean(axis=1), 0.0, atol=1e-12)
    variance = cache.xhat1.var(axis=1)
    assert np.all(variance <= 1.0) and np.all(variance > 0.99)


def test_residual_path_alone_when_second_layer_is_zero():
    params = _random_encoder(10)
    tensors = params.tensors()
    for name in ("W2", "b2", "ln2_gain", "ln2_bias"):
        tensors[name] = np.zeros_like(tensors[name])
    params = params.with_tensors(tensors)

    out, cache = encode_poses(params, CANONICAL.flatten()[None, :])
    z1 = cache.z1[0]
    pooled = np.maximum(z1[0::2], z1[1::2])
    np.testing.assert_allclose(out[0], params.proj_gamma @ pooled, atol=1e-14)


def test_output_is_linear_in_gamma():
    params = _random_encoder(12)
    base, _ = encode_poses(params, CANONICAL.flatten()[None, :])
    tensors = params.tensors()
    tensors["proj_gamma"] = 2.5 * tensors["proj_gamma"]
    scaled, _ = encode_poses(params.with_tensors(tensors), CANONICAL.flatten()[None, :])
    np.testing.assert_allclose(scaled, 2.5 * base, atol=1e-14)


def test_wrong_input_width():
    with pytest.raises(ShapeMismatch):
        encode_poses(_random_encoder(1), np.zeros((1, 6)))


def test_pooling_shape_is_enforced():
    with pytest.raises(ShapeMismatch):
        EncoderParams.init(num_keypoints=2, hidden=7, embed_dim=4)

    tensors = EncoderParams.init(num_keypoints=2, hidden=8, embed_dim=4).tensors()
    with pytest.raises(ShapeMismatch):
        EncoderParams(**{**tensors, "proj_gamma": np.zeros((4, 3))})


# ---------- backward ----------

def test_zero_upstream_gradient_gives_zero_gradients():
    params = _random_encoder(2)
    _, cache = encode_poses(params, np.ones((2, 4)))
    grads = pose_encoder_backward(params, cache, np.zeros((2, 4)))
    for g in grads.values():
        assert not np.any(g)


@pytest.mark.parametrize("seed", range(20))
def test_encoder_gradients_match_finite_differences(seed, numgrad, grad_close):
    rng = np.random.default_rng(seed)
    num_keypoints = int(rng.integers(2, 4))
    params = _random_encoder(seed, num_keypoints=num_keypoints)
    x = rng.normal(size=(int(rng.integers(1, 5)), 2 * num_keypoints))
    upstream = rng.normal(size=(x.shape[0], params.embed_dim))

    tensors = {name: arr.copy() for name, arr in params.tensors().items()}

    def loss():
        out, _ = encode_poses(params.with_tensors(tensors), x)
        return float((out * upstream).sum())

    _, cache = encode_poses(params, x)
    analytic = pose_encoder_backward(params, cache, upstream)
    for name in EncoderParams.TENSORS:
        grad_close(analytic[name], numgrad(loss, tensors[name]))
    grad_close(analytic["input"], numgrad(loss, x))


def test_dropout_masks_are_replayed_in_backward(numgrad, grad_close):
    params = _random_encoder(21, dropout_rate=0.3)
    x = np.random.default_rng(21).normal(size=(3, 4))
    upstream = np.random.default_rng(22).normal(size=(3, 4))
    tensors = {name: arr.copy() for name, arr in params.tensors().items()}

    def loss():
        out, _ = encode_poses(params.with_tensors(tensors), x, train_mode=True, rng_seed=5)
        return float((out * upstream).sum())

    _, cache = encode_poses(params, x, train_mode=True, rng_seed=5)
    analytic = pose_encoder_backward(params, cache, upstream)
    grad_close(analytic["W1"], numgrad(loss, tensors["W1"]))
    grad_close(analytic["ln2_gain"], numgrad(loss, tensors["ln2_gain"]))


def test_stale_cache_is_detected():
    small = _random_encoder(1, hidden=8)
    wide = _random_encoder(1, hidden=10)
    _, cache = encode_poses(small, np.ones((2, 4)))
    with pytest.raises(StaleCache):
        pose_encoder_backward(wide, cache, np.zeros((2, 4)))
    with pytest.raises(StaleCache):
        pose_encoder_backward(small, cache, np.zeros((3, 4)))


# ---------- RGB projection ----------

def test_identity_projection_passes_features_through():
    feature = np.array([0.5, -1.0, 2.0])
    emb = rgb_project(ProjectionParams(W=np.eye(3), b=np.zeros(3)), feature, frame_index=4)
    np.testing.assert_array_equal(emb.vector, feature)
    assert emb.modality is Modality.RGB and emb.frame_index == 4


def test_zero_projection_returns_bias():
    emb = rgb_project(ProjectionParams(W=np.zeros((2, 3)), b=np.array([1.5, -2.0])), np.ones(3))
    np.testing.assert_array_equal(emb.vector, [1.5, -2.0])


def test_seeded_projection_matches_loop_reference():
    params = ProjectionParams.init(feature_dim=6, embed_dim=4, seed=11)
    feature = np.random.default_rng(11).normal(size=6)
    expected = _matvec(params.W, list(feature), params.b)
    np.testing.assert_allclose(rgb_project(params, feature).vector, expected, rtol=1e-13, atol=1e-13)


def test_projection_gradients_match_finite_differences(numgrad, grad_close):
    rng = np.random.default_rng(13)
    params = ProjectionParams.init(feature_dim=5, embed_dim=3, seed=13)
    x = rng.normal(size=(4, 5))
    upstream = rng.normal(size=(4, 3))
    W, b = params.W.copy(), params.b.copy()

    def loss():
        return float((project_features(ProjectionParams(W=W, b=b), x) * upstream).sum())

    analytic = rgb_project_backward(params, x, upstream)
    grad_close(analytic["W"], numgrad(loss, W))
    grad_close(analytic["b"], numgrad(loss, b))
    grad_close(analytic["input"], numgrad(loss, x))


# ---------- checkpoints ----------

def test_checkpoint_round_trip(tmp_path):
    params = _random_encoder(30)
    path = save_checkpoint(tmp_path / "enc.bin", params.tensors(), meta={"hidden": 8})
    tensors, meta = load_checkpoint(path)

    assert meta == {"hidden": 8}
    assert list(tensors) == list(EncoderParams.TENSORS)
    for name, arr in params.tensors().items():
        np.testing.assert_array_equal(tensors[name], arr.astype(np.float32).astype(np.float64))

    again = save_checkpoint(tmp_path / "again.bin", tensors, meta=meta)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "missing.bin")

    bogus = tmp_path / "bogus.bin"
    bogus.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ParseError):
        load_checkpoint(bogus)

    good = save_checkpoint(tmp_path / "good.bin", {"W": np.ones((3, 3))})
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(truncated)
    assert good.read_bytes().startswith(CHECKPOINT_MAGIC)
