import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from navdistill import tensornet as tn
from navdistill.navenv import EnvConfig, NavEnv
from navdistill.policy import (
    AugmentationConfig,
    KeyEncoder,
    NetConfig,
    ObsBatch,
    act,
    augment,
    build_inputs,
    build_network,
    color_jitter,
    encode_laser,
    encode_map,
    load_policy,
    momentum_encoder_forward,
    random_scale,
    save_policy,
    squashed_log_prob,
    transform,
)

SMALL = NetConfig(conv_filters=(4, 8, 8), map_feature=16, laser_hidden=16, laser_feature=8, head_hidden=32,
                  transform_hidden=32)


def random_batch(rng, n=3, cfg=NetConfig()):
    return ObsBatch(
        ego_map=rng.uniform(0, 1, (n, cfg.map_channels, cfg.map_size, cfg.map_size)).astype(np.float32),
        laser=rng.uniform(0, 1, (n, cfg.n_rays)).astype(np.float32),
        goal_vec=rng.uniform(-1, 1, (n, 2)).astype(np.float32),
        pose=rng.uniform(-1, 1, (n, 4)).astype(np.float32),
    )


@pytest.fixture(scope="module")
def teacher():
    return build_network("teacher", NetConfig(), seed=0)


@pytest.fixture(scope="module")
def student():
    return build_network("student", NetConfig(), seed=1)


def test_feature_widths(teacher, rng):
    b = random_batch(rng)
    assert encode_map(teacher, b.ego_map).shape == (3, 128)
    assert encode_laser(teacher, b.laser).shape == (3, 64)
    assert encode_map(teacher, b.ego_map[0]).shape == (1, 128)


def test_zero_map_finite(teacher):
    z = encode_map(teacher, np.zeros((1, 3, 64, 64), np.float32))
    assert np.all(np.isfinite(z))


def test_identical_inputs_identical_features(teacher, rng):
    b = random_batch(rng)
    assert np.array_equal(encode_map(teacher, b.ego_map), encode_map(teacher, b.ego_map))


def test_encoder_shape_errors(teacher):
    with pytest.raises(tn.ShapeError):
        encode_map(teacher, np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(tn.ShapeError):
        encode_laser(teacher, np.zeros((1, 59), np.float32))


def test_transform_width_and_errors(student, rng):
    z_hat = rng.normal(size=(2, 128))
    q_hat = rng.normal(size=(2, 64))
    with tn.no_grad():
        assert transform(student, z_hat, q_hat).shape == (2, 128)
        assert np.array_equal(transform(student, z_hat, q_hat).data, transform(student, z_hat, q_hat).data)
    with pytest.raises(tn.ShapeError):
        transform(student, z_hat)


def test_transform_gradient_reaches_both_inputs():
    net = build_network("student", SMALL, seed=4, dtype=np.float64)
    rng = np.random.default_rng(0)
    z = tn.Tensor(rng.normal(size=(2, 16)), requires_grad=True)
    q = tn.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    tn.tsum(net.transform(z, q)).backward()
    assert np.abs(z.grad).sum() > 0 and np.abs(q.grad).sum() > 0


def test_no_fusion_transform_ignores_laser():
    net = build_network("student", SMALL, seed=4, laser_fusion=False)
    assert net.transform.in_features == 16
    assert net.fingerprint() != build_network("student", SMALL, seed=4).fingerprint()


@pytest.mark.parametrize("kind", ["teacher", "map_laser", "pose_laser", "student"])
def test_forward_shapes(kind, rng):
    net = build_network(kind, SMALL, seed=0)
    mu, log_std, value, aux = net.forward(random_batch(rng, 4, SMALL))
    assert mu.shape == (4, 3) and log_std.shape == (3,)
    assert (value is None) == (kind == "student")
    assert aux["z"].shape == (4, 16)


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_network("robot", SMALL)


def test_act_mean_deterministic(teacher, rng):
    b = random_batch(rng)
    a1 = act(teacher, b, "mean")[0]
    a2 = act(teacher, b, "mean")[0]
    assert np.array_equal(a1, a2)
    with pytest.raises(ValueError):
        act(teacher, b, "sample")
    with pytest.raises(ValueError):
        act(teacher, b, "greedy")


def test_act_log_prob_matches_density_of_action():
    net = build_network("teacher", SMALL, seed=2, dtype=np.float64)
    rng = np.random.default_rng(5)
    b = random_batch(rng, 6, SMALL)
    action, u, logp, _ = act(net, b, "sample", rng)
    with tn.no_grad():
        mu, log_std, _, _ = net.forward(b)
    scale = np.asarray(SMALL.action_scale)
    # recover u from the action alone and apply the change of variables
    y = action / scale
    u_back = np.arctanh(y)
    ref = (norm.logpdf(u_back, mu.data, np.exp(log_std.data)) - np.log(scale * (1 - y ** 2))).sum(-1)
    assert np.allclose(u_back, u, atol=1e-8)
    assert np.allclose(logp, ref, atol=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_act_within_speed_limits(seed):
    net = build_network("teacher", SMALL.replace(init_log_std=2.0), seed=seed % 7)
    rng = np.random.default_rng(seed)
    action = act(net, random_batch(rng, 4, SMALL), "sample", rng)[0]
    limit = np.asarray(SMALL.action_scale)
    assert np.all(np.abs(action) <= limit)


def test_squashed_log_prob_extreme_u_finite():
    u = np.array([[40.0, -40.0, 0.0]])
    out = squashed_log_prob(u, np.zeros((1, 3)), np.zeros(3), np.ones(3))
    assert np.all(np.isfinite(out))


@settings(max_examples=20)
@given(st.integers(0, 10 ** 6))
def test_features_finite_on_fuzz(seed):
    rng = np.random.default_rng(seed)
    net = build_network("student", SMALL, seed=seed % 5)
    b = random_batch(rng, 2, SMALL)
    mu, log_std, _, aux = net.forward(b)
    for t in (mu, log_std, aux["z"], aux["z_hat"], aux["q"]):
        assert np.all(np.isfinite(t.data))


def test_build_inputs_modes():
    env = NavEnv(EnvConfig())
    pair = env.reset(0)
    noisy, clean = pair
    t = build_inputs([pair], "teacher")
    assert np.array_equal(t.ego_map[0], clean.ego_map) and np.array_equal(t.laser[0], noisy.laser)
    n = build_inputs([pair], "noisy")
    assert np.array_equal(n.ego_map[0], noisy.ego_map) and np.array_equal(n.goal_vec[0], noisy.goal_vec)
    c = build_inputs([pair], "clean")
    assert np.array_equal(c.laser[0], clean.laser)


# -- augmentation ----------------------------------------------------------------------


def test_augment_identity_settings(rng):
    maps = rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)
    cfg = AugmentationConfig(brightness=(1.0, 1.0), offset=(0.0, 0.0), scale=(1.0, 1.0))
    assert np.array_equal(augment(maps, rng, cfg), maps)
    assert np.array_equal(random_scale(maps, np.ones(2)), maps)
    assert np.array_equal(color_jitter(maps, np.ones(2, np.float32), np.zeros(2, np.float32)), maps)


def test_augment_range_and_shape(rng):
    maps = rng.uniform(0, 1, (5, 3, 64, 64)).astype(np.float32)
    out = augment(maps, rng)
    assert out.shape == maps.shape and out.min() >= 0 and out.max() <= 1
    assert augment(maps[0], rng).shape == (3, 64, 64)


def test_augment_jitter_only_occupancy(rng):
    maps = rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
    out = color_jitter(maps, np.array([0.5], np.float32), np.array([0.1], np.float32))
    assert np.array_equal(out[:, 1:], maps[:, 1:])
    assert np.allclose(out[:, 0], np.clip(maps[:, 0] * 0.5 + 0.1, 0, 1))


def test_augment_independent_views(rng):
    maps = rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
    assert not np.array_equal(augment(maps, rng), augment(maps, rng))


def test_scale_area_ratio():
    maps = np.zeros((1, 3, 64, 64), np.float32)
    maps[0, 0, 12:52, 12:52] = 1.0  # 40x40 square about the center
    small = random_scale(maps, np.array([0.8]))
    ratio = small[0, 0].sum() / maps[0, 0].sum()
    assert ratio == pytest.approx(0.64, abs=0.03)
    big = random_scale(maps, np.array([1.2]))
    assert big[0, 0].sum() / maps[0, 0].sum() == pytest.approx(1.44, abs=0.05)


def test_scale_zero_pads_when_shrinking():
    maps = np.ones((1, 1, 64, 64), np.float32)
    out = random_scale(maps, np.array([0.8]))
    assert out[0, 0, 0, 0] == 0.0 and out[0, 0, 32, 32] == 1.0


# -- key encoder -----------------------------------------------------------------------------


def test_key_encoder_copy_and_norm(rng):
    net = build_network("teacher", SMALL, seed=3, dtype=np.float64)
    keys = KeyEncoder(net.map_encoder, 0.999)
    view = rng.uniform(0, 1, (4, 3, 64, 64))
    k = keys(view)
    with tn.no_grad():
        q = tn.l2_normalize(net.map_encoder(view), axis=1).data
    assert np.allclose(k, q)
    assert np.allclose(np.linalg.norm(k, axis=1), 1.0)
    assert momentum_encoder_forward(keys, view[0]).shape == (1, 16)


def test_key_encoder_ema_moves_thousandth():
    net = build_network("teacher", SMALL, seed=3, dtype=np.float64)
    keys = KeyEncoder(net.map_encoder, 0.999)
    before = {n: p.data.copy() for n, p in keys.encoder.named_parameters()}
    for p in net.map_encoder.parameters():
        p.data = p.data + 1.0
    keys.update(net.map_encoder)
    for (name, p), (_, q) in zip(keys.encoder.named_parameters(), net.map_encoder.named_parameters()):
        assert np.allclose(p.data - before[name], 0.001 * (q.data - before[name]))


def test_key_encoder_never_gets_gradients(rng):
    net = build_network("teacher", SMALL, seed=3, dtype=np.float64)
    keys = KeyEncoder(net.map_encoder, 0.99)
    view = rng.uniform(0, 1, (2, 3, 64, 64))
    k = tn.Tensor(keys(view))
    q = tn.l2_normalize(net.map_encoder(view), axis=1)
    tn.tsum(q * k).backward()
    assert all(p.grad is None for p in keys.encoder.parameters())
    assert all(p.grad is not None for p in net.map_encoder.parameters())


# -- persistence --------------------------------------------------------------------------------


@pytest.mark.parametrize("kind,kw", [("teacher", {}), ("pose_laser", {}), ("student", {"laser_fusion": False})])
def test_policy_round_trip(tmp_path, kind, kw, rng):
    net = build_network(kind, SMALL, seed=6, **kw)
    path = tmp_path / "p.ckpt"
    save_policy(net, net.paramset(), path, {"extra": 1})
    loaded, params = load_policy(path)
    assert loaded.kind == net.kind and params.metadata["extra"] == 1
    b = random_batch(rng, 2, SMALL)
    assert np.array_equal(act(net, b, "mean")[0], act(loaded, b, "mean")[0])


def test_student_init_from_teacher_matches_actions(rng):
    cfg = SMALL.replace(transform_hidden=32)
    t = build_network("teacher", cfg, seed=0)
    s = build_network("student", cfg, seed=9, laser_fusion=True)
    s.init_from_teacher(t)
    b = random_batch(rng, 3, cfg)
    assert np.allclose(act(t, b, "mean")[0], act(s, b, "mean")[0], atol=1e-5)
