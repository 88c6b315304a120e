import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from navdistill import tensornet as tn
from navdistill.gridworld import bundled_scene
from navdistill.navenv import EnvConfig, NoiseModel, make_vec
from navdistill.policy import KeyEncoder, NetConfig, build_network, load_policy
from navdistill.teacher import (
    METRIC_COLUMNS,
    ContrastiveConfig,
    PPOConfig,
    RolloutCollector,
    TeacherRunConfig,
    collect_rollouts,
    compute_gae,
    infonce_loss,
    normalize_advantages,
    ppo_loss,
    teacher_update,
    train_teacher,
)
from oracles import brute_force_gae, grad_check

SMALL = NetConfig(conv_filters=(4, 8, 8), map_feature=16, laser_hidden=16, laser_feature=8, head_hidden=32,
                  transform_hidden=32)
SMALL_ENV = EnvConfig(scene=bundled_scene("small_train"), episode_steps=40, noise=NoiseModel(0.2, 0.05, 0.05))


def test_ppo_defaults():
    p = PPOConfig()
    assert (p.gamma, p.gae_lambda, p.clip, p.nsteps, p.nepochs, p.nminibatch, p.n_envs) == \
        (0.99, 0.95, 0.15, 256, 2, 4, 4)
    assert (p.total_steps, p.lr0) == (2_000_000, 4e-4)
    c = ContrastiveConfig()
    assert (c.tau, c.beta) == (0.25, 0.2)


def test_contrastive_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(tau=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(beta=-1.0)


# -- GAE --------------------------------------------------------------------------------


@settings(max_examples=80)
@given(st.integers(1, 12), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2 ** 32 - 1))
def test_gae_matches_definition(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=T)
    v = rng.normal(size=T)
    d = rng.random(T) < 0.25
    boot = rng.normal()
    adv, ret = compute_gae(r[:, None], v[:, None], d[:, None], [boot], gamma, lam)
    want = brute_force_gae(r, v, d, boot, gamma, lam)
    assert np.allclose(adv[:, 0], want, atol=1e-10, rtol=0)
    assert np.allclose(ret[:, 0], want + v, atol=1e-10, rtol=0)


def test_gae_gamma_zero_is_td_residual(rng):
    r, v = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    adv, _ = compute_gae(r, v, np.zeros((6, 2)), np.zeros(2), gamma=0.0, lam=0.95)
    assert np.allclose(adv, r - v)


def test_gae_lambda_one_is_discounted_return(rng):
    r, v = rng.normal(size=5), rng.normal(size=5)
    adv, ret = compute_gae(r[:, None], v[:, None], np.zeros((5, 1)), [0.0], gamma=0.9, lam=1.0)
    disc = np.array([sum(0.9 ** (k - t) * r[k] for k in range(t, 5)) for t in range(5)])
    assert np.allclose(ret[:, 0], disc)


def test_gae_done_cuts_bootstrap():
    adv, _ = compute_gae([[1.0]], [[0.0]], [[True]], [100.0], gamma=0.99, lam=0.95)
    assert adv[0, 0] == 1.0


def test_gae_shape_mismatch():
    with pytest.raises(ValueError):
        compute_gae(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((3, 2)), np.zeros(2))


def test_normalize_advantages(rng):
    a = normalize_advantages(rng.normal(3, 5, 100))
    assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-6)


# -- PPO objective --------------------------------------------------------------------------


@pytest.fixture
def batch_setup():
    net = build_network("teacher", SMALL, seed=0, dtype=np.float64)
    vec = make_vec(SMALL_ENV, 2)
    buf = collect_rollouts(vec, net, 8, np.random.default_rng(0))
    buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap)
    obs, arr = buf.flat()
    return net, obs, arr


def test_rollout_shapes(batch_setup):
    net, obs, arr = batch_setup
    assert obs.ego_map.shape == (16, 3, 64, 64) and arr["u"].shape == (16, 3)
    assert len(arr["log_prob"]) == 16


def test_ratio_is_one_at_collection_policy(batch_setup):
    net, obs, arr = batch_setup
    adv = normalize_advantages(arr["advantages"])
    loss, stats = ppo_loss(net, obs, arr["u"], arr["log_prob"], adv, arr["returns"])
    assert stats["ratio_mean"] == pytest.approx(1.0, abs=1e-9)
    assert stats["clip_frac"] == 0.0
    assert stats["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-9)


def test_clipping_kills_policy_gradient(batch_setup):
    net, obs, arr = batch_setup
    adv = np.ones(16)
    # ratio = e^0.5 > 1 + clip for every sample with positive advantage
    old = arr["log_prob"] - 0.5
    loss, stats = ppo_loss(net, obs, arr["u"], old, adv, arr["returns"], value_coef=0.0, entropy_coef=0.0)
    assert stats["clip_frac"] == 1.0
    assert stats["policy_loss"] == pytest.approx(-1.15)
    loss.backward()
    assert np.allclose(net.heads.actor.layers[-1].weight.grad, 0.0)
    net.zero_grad()
    # negative advantage: min picks the unclipped branch, gradient flows
    loss, _ = ppo_loss(net, obs, arr["u"], old, -adv, arr["returns"], value_coef=0.0, entropy_coef=0.0)
    loss.backward()
    assert np.abs(net.heads.actor.layers[-1].weight.grad).sum() > 0


def test_ppo_loss_finite_difference():
    net = build_network("teacher", SMALL, seed=1, dtype=np.float64)
    rng = np.random.default_rng(3)
    from test_policy import random_batch

    obs = random_batch(rng, 4, SMALL)
    u = rng.normal(size=(4, 3))
    old = rng.normal(size=4) - 3
    adv = rng.normal(size=4)
    ret = rng.normal(size=4)
    log_std = net.heads.log_std

    def build(ls):
        net.heads.log_std = ls
        return ppo_loss(net, obs, u, old, adv, ret, clip=10.0)[0]

    try:
        err = grad_check(build, [log_std.data.copy()])
    finally:
        net.heads.log_std = log_std
    assert err < 1e-4


# -- InfoNCE -----------------------------------------------------------------------------


def test_infonce_uniform_logits_is_log_batch():
    q = np.tile([[1.0, 0.0]], (8, 1))
    assert float(infonce_loss(q, q, 0.25).data) == pytest.approx(math.log(8))


@given(st.integers(2, 8), st.integers(2, 6), st.floats(0.05, 2.0), st.integers(0, 2 ** 32 - 1))
def test_infonce_direct_oracle(B, d, tau, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(B, d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k = rng.normal(size=(B, d))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    logits = q @ k.T / tau
    want = np.mean([logsumexp(logits[i]) - logits[i, i] for i in range(B)])
    assert float(infonce_loss(q, k, tau).data) == pytest.approx(want, abs=1e-10)


def test_infonce_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, k = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert grad_check(lambda a, b: infonce_loss(a, b, 0.25), [q, k]) < 1e-4


def test_infonce_errors():
    with pytest.raises(tn.ShapeError):
        infonce_loss(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        infonce_loss(np.ones((1, 2)), np.ones((1, 2)))


def test_infonce_positive_pairs_lower_loss():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(16, 8))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    aligned = float(infonce_loss(q, q, 0.25).data)
    shuffled = float(infonce_loss(q, q[::-1].copy(), 0.25).data)
    assert aligned < shuffled


# -- update ---------------------------------------------------------------------------------


def fresh_buffer(seed=0):
    net = build_network("teacher", SMALL, seed=seed)
    buf = collect_rollouts(make_vec(SMALL_ENV, 2), net, 8, np.random.default_rng(seed))
    return net, buf


def test_beta_zero_equals_pure_ppo():
    ppo = PPOConfig(nepochs=2, nminibatch=2)
    net_a, buf = fresh_buffer()
    net_b = net_a.clone()
    params_a, params_b = net_a.paramset(), net_b.paramset()
    keys = KeyEncoder(net_a.map_encoder, 0.99)
    teacher_update(buf, net_a, keys, params_a, ppo, ContrastiveConfig(beta=0.0), 1e-3, np.random.default_rng(5))

    # hand-rolled reference: PPO loss only, same minibatch order
    rng = np.random.default_rng(5)
    obs, arr = buf.flat()
    adv = normalize_advantages(arr["advantages"])
    for _ in range(ppo.nepochs):
        for idx in np.array_split(rng.permutation(len(adv)), ppo.nminibatch):
            loss, _ = ppo_loss(net_b, obs.take(idx), arr["u"][idx], arr["log_prob"][idx], adv[idx],
                               arr["returns"][idx], ppo.clip, ppo.value_coef, ppo.entropy_coef)
            loss.backward()
            tn.adam_step(params_b, 1e-3, max_grad_norm=ppo.max_grad_norm)
    assert params_a.checksum() == params_b.checksum()


def test_update_moves_key_encoder_without_gradients():
    net, buf = fresh_buffer(1)
    params = net.paramset()
    keys = KeyEncoder(net.map_encoder, 0.9)
    before = keys.encoder.state_dict()
    stats = teacher_update(buf, net, keys, params, PPOConfig(nepochs=1, nminibatch=2), ContrastiveConfig(beta=0.2),
                           1e-3, np.random.default_rng(0))
    assert math.isfinite(stats["infonce_loss"])
    assert all(p.grad is None for p in keys.encoder.parameters())
    after = keys.encoder.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    # key params stay strictly between the old key and the new query params
    for (name, kp), (_, qp) in zip(keys.encoder.named_parameters(), net.map_encoder.named_parameters()):
        if not np.array_equal(before[name], qp.data):
            assert not np.array_equal(kp.data, qp.data)


def test_update_returns_finite_stats():
    net, buf = fresh_buffer(2)
    stats = teacher_update(buf, net, None, net.paramset(), PPOConfig(nepochs=1, nminibatch=2),
                           ContrastiveConfig(beta=0.2), 1e-3, np.random.default_rng(0))
    assert math.isnan(stats["infonce_loss"])
    for k in ("policy_loss", "value_loss", "entropy", "loss", "grad_norm"):
        assert math.isfinite(stats[k])


def test_collector_keeps_state_between_calls():
    net = build_network("teacher", SMALL, seed=0)
    col = RolloutCollector(make_vec(SMALL_ENV, 2), "teacher")
    rng = np.random.default_rng(0)
    col.collect(net, 30, rng)
    buf = col.collect(net, 30, rng)
    assert buf.dones.sum() >= 2  # 60 steps over 40-step episodes
    assert all("return" in e and "success" in e for e in buf.episodes)


# -- training driver -------------------------------------------------------------------------


def tiny_run(tmp_path, total, resume=None, beta=0.2):
    return TeacherRunConfig(env=SMALL_ENV, net=SMALL,
                            ppo=PPOConfig(nsteps=16, n_envs=2, nminibatch=2, nepochs=1, total_steps=total),
                            contrastive=ContrastiveConfig(beta=beta), seed=3, run_dir=str(tmp_path / "t"),
                            checkpoint_every=2, resume=resume)


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_teacher_and_resume(tmp_path):
    final = train_teacher(tiny_run(tmp_path, 64))
    rows = read_metrics(tmp_path / "t" / "metrics.csv")
    assert tuple(rows[0].keys()) == METRIC_COLUMNS
    assert [int(r["steps"]) for r in rows] == [32, 64]
    net, params = load_policy(final)
    assert params.metadata["global_step"] == 64 and params.metadata["beta_t"] == 0.2
    assert (tmp_path / "t" / "checkpoints" / "update_00002.ckpt").exists()
    assert json.loads((tmp_path / "t" / "config.json").read_text())["ppo"]["nsteps"] == 16

    final2 = train_teacher(tiny_run(tmp_path, 128, resume=str(final)))
    rows = read_metrics(tmp_path / "t" / "metrics.csv")
    assert [int(r["steps"]) for r in rows] == [32, 64, 96, 128]
    assert [int(r["update_index"]) for r in rows] == [1, 2, 3, 4]
    _, p2 = load_policy(final2)
    assert p2.metadata["update_index"] == 4 and p2.step == 4 * 2  # one Adam step per minibatch


def test_learning_rate_decays_linearly(tmp_path):
    train_teacher(tiny_run(tmp_path, 128, beta=0.0))
    lrs = [float(r["lr"]) for r in read_metrics(tmp_path / "t" / "metrics.csv")]
    assert lrs == pytest.approx([4e-4 * (1 - s / 128) for s in (0, 32, 64, 96)])
