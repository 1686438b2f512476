import numpy as np
import pytest

from posecon.contrastive import (
    LossReport,
    MiningConfig,
    MiningStrategy,
    PairSets,
    contrastive_loss,
    embed_and_contrast,
    mine_all,
    mine_pairs,
    negative_mask,
)
from posecon.embedding_nets import EncoderParams, Embedding, Modality, ProjectionParams
from posecon.errors import ConfigError, EmptySequence, IndexOutOfRange, ShapeMismatch
from posecon.pose_geometry import NormalizedPose, RawPose, normalize_pose

VANILLA = MiningConfig(strategy=MiningStrategy.VANILLA)


def _pose(points):
    return NormalizedPose(np.asarray(points, dtype=np.float64))


def _random_poses(rng, t, num_keypoints=4):
    return [normalize_pose(RawPose(rng.normal(size=(num_keypoints, 2))))[0] for _ in range(t)]


# ---------- mining ----------

def test_vanilla_negatives_are_every_other_frame():
    ps = mine_pairs(VANILLA, _random_poses(np.random.default_rng(0), 4), 1)
    assert ps.positives == {1}
    assert ps.negatives == {0, 2, 3}


def test_pose_mining_threshold():
    poses = [
        _pose([[1.0, 0.0], [-1.0, 0.0]]),
        _pose([[1.0, 0.0], [-1.0, 0.2]]),
        _pose([[1.0, 0.0], [-1.0, 0.6]]),
    ]
    ps = mine_pairs(MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.2), poses, 0)
    assert ps.positives == {0}
    assert ps.negatives == {2}


def test_zero_delta_equals_vanilla():
    rng = np.random.default_rng(1)
    pose_cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.0)
    for _ in range(500):
        poses = _random_poses(rng, int(rng.integers(1, 8)))
        assert mine_all(pose_cfg, poses) == mine_all(VANILLA, poses)


def test_negative_sets_shrink_as_delta_grows():
    rng = np.random.default_rng(2)
    grid = np.linspace(0.0, 1.5, 10)
    for _ in range(50):
        poses = _random_poses(rng, 7)
        masks = [negative_mask(MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=d), poses) for d in grid]
        for looser, tighter in zip(masks, masks[1:]):
            assert np.all(tighter <= looser)


def test_mine_pairs_agrees_with_mine_all():
    poses = _random_poses(np.random.default_rng(3), 6)
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.4)
    assert [mine_pairs(cfg, poses, t) for t in range(6)] == mine_all(cfg, poses)


def test_anchor_out_of_range():
    with pytest.raises(IndexOutOfRange):
        mine_pairs(VANILLA, _random_poses(np.random.default_rng(4), 3), 3)


@pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau": -1.0}, {"delta": -0.1}])
def test_invalid_mining_config(kwargs):
    with pytest.raises(ConfigError):
        MiningConfig(**kwargs)


# ---------- closed forms ----------

def test_single_frame_has_zero_loss():
    rgb = np.array([[0.3, -0.2, 0.9]])
    report, d_rgb, d_pose = contrastive_loss(rgb, rgb.copy(), [PairSets(0, frozenset({0}), frozenset())], VANILLA)
    assert report.l_i2p == 0.0 and report.l_p2i == 0.0 and report.l_con == 0.0
    assert not np.any(d_rgb) and not np.any(d_pose)


def test_equal_similarities_give_log_of_candidate_count():
    rgb = np.tile([1.0, 2.0], (3, 1))
    pose = np.tile([0.5, -1.0], (3, 1))
    pairsets = mine_all(VANILLA, [_pose(np.eye(2))] * 3)
    for tau in (0.07, 1.0, 5.0):
        report, _, _ = contrastive_loss(rgb, pose, pairsets, MiningConfig(MiningStrategy.VANILLA, tau=tau))
        assert report.l_i2p == pytest.approx(np.log(3), abs=1e-9)
        assert report.l_p2i == pytest.approx(np.log(3), abs=1e-9)


def test_two_frame_fixture():
    emb = np.array([[1.0, 0.0], [0.0, 1.0]])
    pairsets = mine_all(VANILLA, [_pose(np.eye(2))] * 2)
    report, _, _ = contrastive_loss(emb, emb.copy(), pairsets, MiningConfig(MiningStrategy.VANILLA, tau=1.0))
    assert report.l_i2p == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-9)
    assert report.l_p2i == pytest.approx(0.313262, abs=1e-6)
    assert report.l_con == pytest.approx(2.0 * np.log1p(np.exp(-1.0)), abs=1e-9)
    assert report.l_con == pytest.approx(0.626524, abs=1e-6)


def test_embedding_objects_are_accepted():
    rgb = [Embedding(np.array([1.0, 0.0]), Modality.RGB, 0), Embedding(np.array([0.0, 1.0]), Modality.RGB, 1)]
    pose = [Embedding(np.array([1.0, 0.0]), Modality.POSE, 0), Embedding(np.array([0.0, 1.0]), Modality.POSE, 1)]
    pairsets = mine_all(VANILLA, [_pose(np.eye(2))] * 2)
    report, _, _ = contrastive_loss(rgb, pose, pairsets, MiningConfig(MiningStrategy.VANILLA, tau=1.0))
    assert report.l_con == pytest.approx(0.626524, abs=1e-6)


def test_huge_temperature_approaches_log_one_plus_negatives():
    rng = np.random.default_rng(6)
    poses = _random_poses(rng, 6)
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.5, tau=1e6)
    pairsets = mine_all(cfg, poses)
    report, _, _ = contrastive_loss(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), pairsets, cfg)

    expected = np.mean([np.log1p(len(ps.negatives)) for ps in pairsets])
    # each logit lies in [-1e-6, 1e-6], so a per-anchor term moves by at most 2e-6
    assert report.l_i2p == pytest.approx(expected, abs=2e-6)
    assert report.l_p2i == pytest.approx(expected, abs=2e-6)


def test_report_totals():
    report = LossReport.combine(0.25, 0.5, 1.0)
    assert report.l_con == 0.75
    assert report.l_final == 1.75
    assert report.as_dict()["l_segment"] == 1.0


def test_loss_is_permutation_equivariant():
    rng = np.random.default_rng(7)
    poses = _random_poses(rng, 5)
    rgb, pose = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.3, tau=0.2)
    base, _, _ = contrastive_loss(rgb, pose, mine_all(cfg, poses), cfg)

    perm = rng.permutation(5)
    shuffled, _, _ = contrastive_loss(rgb[perm], pose[perm], mine_all(cfg, [poses[i] for i in perm]), cfg)
    assert shuffled.l_con == pytest.approx(base.l_con, abs=1e-12)


def test_loss_gradients_match_finite_differences(numgrad, grad_close):
    rng = np.random.default_rng(8)
    poses = _random_poses(rng, 5)
    rgb, pose = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.2, tau=0.3)
    pairsets = mine_all(cfg, poses)

    def loss():
        return contrastive_loss(rgb, pose, pairsets, cfg)[0].l_con

    _, d_rgb, d_pose = contrastive_loss(rgb, pose, pairsets, cfg)
    grad_close(d_rgb, numgrad(loss, rgb))
    grad_close(d_pose, numgrad(loss, pose))


def test_shape_errors():
    with pytest.raises(EmptySequence):
        contrastive_loss(np.zeros((0, 3)), np.zeros((0, 3)), [], VANILLA)
    with pytest.raises(ShapeMismatch):
        contrastive_loss(np.ones((2, 3)), np.ones((3, 3)), [], VANILLA)
    with pytest.raises(ShapeMismatch):
        contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), [PairSets(0, frozenset({0}), frozenset({0}))], VANILLA)


# ---------- composition with the networks ----------

def _networks(seed, num_keypoints=2, feature_dim=3):
    encoder = EncoderParams.init(num_keypoints, hidden=8, embed_dim=4, dropout_rate=0.0, seed=seed)
    projection = ProjectionParams.init(feature_dim, embed_dim=4, seed=seed + 1)
    return encoder, projection


def test_no_negatives_means_zero_loss_and_gradients():
    rng = np.random.default_rng(9)
    encoder, projection = _networks(9)
    poses = _random_poses(rng, 4, num_keypoints=2)
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=1e6)
    report, grads = embed_and_contrast(encoder, projection, poses, rng.normal(size=(4, 3)), cfg)
    assert report.l_con == 0.0
    for part in grads.values():
        for g in part.values():
            assert not np.any(g)


def test_missing_poses_are_spectators():
    rng = np.random.default_rng(10)
    encoder, projection = _networks(10)
    poses = _random_poses(rng, 5, num_keypoints=2)
    features = rng.normal(size=(5, 3))
    cfg = MiningConfig(MiningStrategy.VANILLA, tau=0.5)

    with_gaps = [poses[0], None, poses[2], None, poses[4]]
    kept = [0, 2, 4]
    a, ga = embed_and_contrast(encoder, projection, with_gaps, features, cfg, train_seed=3)
    b, gb = embed_and_contrast(encoder, projection, [poses[i] for i in kept], features[kept], cfg, train_seed=3)
    assert a == b
    for prefix in ("encoder", "projection"):
        for name in ga[prefix]:
            np.testing.assert_array_equal(ga[prefix][name], gb[prefix][name])


def test_frames_removed_by_pose_mining_are_spectators_for_their_anchor():
    # frames 0 and 1 share a pose; 2 and 3 are far from both and from each other
    poses = [
        _pose([[1.0, 0.0], [-1.0, 0.0]]),
        _pose([[1.0, 0.0], [-1.0, 0.1]]),
        _pose([[1.0, 0.0], [-1.0, 0.8]]),
        _pose([[1.0, 0.0], [-1.0, -0.8]]),
    ]
    config = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.2, tau=0.5)
    pairsets = mine_all(config, poses)
    assert pairsets[0].negatives == {2, 3} and pairsets[1].negatives == {2, 3}

    rng = np.random.default_rng(12)
    rgb, pose_emb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    report, d_rgb, d_pose = contrastive_loss(rgb, pose_emb, pairsets, config)

    # loop reference: anchor t's softmax runs over {t} and its mined negatives only
    def unit(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    sim = unit(rgb) @ unit(pose_emb).T / config.tau
    i2p = p2i = 0.0
    for ps in pairsets:
        t, cands = ps.anchor, [ps.anchor, *sorted(ps.negatives)]
        i2p += np.log(sum(np.exp(sim[t, j]) for j in cands)) - sim[t, t]
        p2i += np.log(sum(np.exp(sim[j, t]) for j in cands)) - sim[t, t]
    assert report.l_i2p == pytest.approx(i2p / 4, abs=1e-12)
    assert report.l_p2i == pytest.approx(p2i / 4, abs=1e-12)

    # moving frame 1's pose embedding cannot reach anchor 0's RGB gradient, and vice versa
    moved_pose = pose_emb.copy()
    moved_pose[1] = rgb[0]
    _, d_rgb_moved, _ = contrastive_loss(rgb, moved_pose, pairsets, config)
    np.testing.assert_allclose(d_rgb_moved[0], d_rgb[0], rtol=1e-12, atol=1e-15)

    moved_rgb = rgb.copy()
    moved_rgb[0] = pose_emb[1]
    _, _, d_pose_moved = contrastive_loss(moved_rgb, pose_emb, pairsets, config)
    np.testing.assert_allclose(d_pose_moved[1], d_pose[1], rtol=1e-12, atol=1e-15)


def test_all_poses_missing_is_zero():
    encoder, projection = _networks(11)
    report, _ = embed_and_contrast(encoder, projection, [None, None], np.ones((2, 3)), VANILLA)
    assert report == LossReport()


@pytest.mark.parametrize("seed", range(5))
def test_composed_gradients_match_finite_differences(seed, numgrad, grad_close):
    rng = np.random.default_rng(100 + seed)
    encoder, projection = _networks(seed, num_keypoints=3)
    t = int(rng.integers(2, 7))
    poses = _random_poses(rng, t, num_keypoints=3)
    features = rng.normal(size=(t, 3))
    cfg = MiningConfig(MiningStrategy.POSE_SUPERVISED, delta=0.1, tau=0.5)

    enc_t = {k: v.copy() for k, v in encoder.tensors().items()}
    proj_t = {k: v.copy() for k, v in projection.tensors().items()}

    def loss():
        report, _ = embed_and_contrast(encoder.with_tensors(enc_t), projection.with_tensors(proj_t), poses, features, cfg)
        return report.l_con

    _, grads = embed_and_contrast(encoder, projection, poses, features, cfg)
    for name, arr in enc_t.items():
        grad_close(grads["encoder"][name], numgrad(loss, arr))
    for name, arr in proj_t.items():
        grad_close(grads["projection"][name], numgrad(loss, arr))
