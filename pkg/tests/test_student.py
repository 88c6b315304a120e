import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navdistill import tensornet as tn
from navdistill.gridworld import bundled_scene
from navdistill.navenv import EnvConfig, NoiseModel, make_vec
from navdistill.policy import NetConfig, build_network, load_policy, save_policy
from navdistill.student import (
    METRIC_COLUMNS,
    StudentConfig,
    StudentRunConfig,
    collect_paired,
    cosine_similarity,
    feature_distill_loss,
    load_teacher,
    make_student,
    policy_distill_loss,
    student_loss,
    student_update,
    train_student,
)
from oracles import gaussian_kl, grad_check

SMALL = NetConfig(conv_filters=(4, 8, 8), map_feature=16, laser_hidden=16, laser_feature=8, head_hidden=32,
                  transform_hidden=32)
NOISY_ENV = EnvConfig(scene=bundled_scene("small_train"), episode_steps=40, noise=NoiseModel(0.3, 0.06, 0.06))
CLEAN_ENV = NOISY_ENV.replace(noise=NoiseModel.clean())


def test_defaults():
    c = StudentConfig()
    assert (c.alpha, c.beta, c.n_envs, c.nsteps, c.total_steps, c.lr0) == (0.25, 0.75, 2, 256, 1_000_000, 2e-4)
    assert c.init == "fresh" and c.driver == "student"


@pytest.mark.parametrize("bad", [dict(alpha=-1), dict(init="copy"), dict(driver="human"),
                                 dict(teacher_input_mode="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        StudentConfig(**bad)


# -- feature distillation ------------------------------------------------------------------


def test_feature_loss_examples():
    z = np.array([[1.0, 2.0, 0.0]])
    assert float(feature_distill_loss(z, z).data) == pytest.approx(-1.0)
    assert float(feature_distill_loss(z, np.array([[-2.0, 1.0, 0.0]])).data) == pytest.approx(0.0)
    assert float(feature_distill_loss(z, -z).data) == pytest.approx(1.0)


@given(st.integers(1, 6), st.integers(2, 10), st.integers(0, 2 ** 32 - 1))
def test_feature_loss_bounded_and_matches_cosine(n, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    val = float(feature_distill_loss(a, b).data)
    assert -1 - 1e-12 <= val <= 1 + 1e-12
    assert val == pytest.approx(-cosine_similarity(a, b).mean(), abs=1e-12)


def test_feature_loss_errors():
    with pytest.raises(ValueError):
        feature_distill_loss(np.zeros((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        feature_distill_loss(np.ones((1, 3)), np.zeros((1, 3)))
    with pytest.raises(tn.ShapeError):
        feature_distill_loss(np.ones((2, 3)), np.ones((2, 4)))


def test_feature_loss_teacher_side_constant():
    zt = tn.Tensor(np.ones((2, 3)), requires_grad=True)
    zs = tn.Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0]]), requires_grad=True)
    feature_distill_loss(zt, zs).backward()
    assert zt.grad is None and zs.grad is not None


def test_feature_loss_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        zt = rng.normal(size=(3, 5))
        assert grad_check(lambda s: feature_distill_loss(zt, s), [rng.normal(size=(3, 5))]) < 1e-4


# -- policy distillation ------------------------------------------------------------------


def test_kl_examples():
    assert float(policy_distill_loss([0.0, 0.0, 0.0], [1, 1, 1], [0.0, 0.0, 0.0], [1, 1, 1]).data) == 0.0
    assert float(policy_distill_loss([[0.0]], [[1.0]], [[1.0]], [[1.0]]).data) == pytest.approx(0.5)


@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_kl_matches_closed_form_and_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    mu_t, mu_s = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    sd_t, sd_s = np.exp(rng.normal(size=(n, 3)) * 0.5), np.exp(rng.normal(size=(n, 3)) * 0.5)
    got = float(policy_distill_loss(mu_t, sd_t, mu_s, sd_s).data)
    assert got == pytest.approx(gaussian_kl(mu_t, sd_t, mu_s, sd_s).mean(), abs=1e-10)
    assert got >= -1e-12


def test_kl_broadcast_state_independent_std(rng):
    mu_t, mu_s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    sd_t, sd_s = np.full(3, 0.6), np.array([0.5, 0.7, 0.9])
    got = float(policy_distill_loss(mu_t, np.broadcast_to(sd_t, (4, 3)), mu_s, sd_s).data)
    assert got == pytest.approx(gaussian_kl(mu_t, sd_t, mu_s, sd_s).mean())


def test_kl_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        policy_distill_loss([0.0], [0.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        policy_distill_loss([0.0], [1.0], [0.0], [-1.0])


def test_kl_gradient():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mu_t, sd_t = rng.normal(size=(2, 3)), np.exp(rng.normal(size=(2, 3)) * 0.3)
        args = [rng.normal(size=(2, 3)), np.exp(rng.normal(size=(2, 3)) * 0.3)]
        assert grad_check(lambda m, s: policy_distill_loss(mu_t, sd_t, m, s), args) < 1e-4


# -- collection and update -------------------------------------------------------------------


def teacher_and_student(seed=0, init="fresh", **kw):
    teacher = build_network("teacher", SMALL, seed=seed, dtype=np.float64)
    cfg = StudentConfig(init=init, nsteps=8, **kw)
    return teacher, make_student(teacher, cfg, seed + 1), cfg


def test_collect_paired_sizes_and_frozen_teacher():
    teacher, student, cfg = teacher_and_student()
    before = teacher.paramset().checksum()
    batch = collect_paired(make_vec(NOISY_ENV, cfg.n_envs), student, teacher, 8, np.random.default_rng(0), cfg)
    assert len(batch) == 16
    assert batch.z_teacher.shape == (16, 16) and batch.mu_teacher.shape == (16, 3)
    assert np.all(batch.std_teacher > 0)
    assert teacher.paramset().checksum() == before


def test_collect_paired_student_sees_noisy_teacher_sees_clean():
    teacher, student, cfg = teacher_and_student()
    vec = make_vec(NOISY_ENV, 1)
    noisy0, clean0 = make_vec(NOISY_ENV, 1).reset_all()[0]
    batch = collect_paired(vec, student, teacher, 1, np.random.default_rng(0), cfg)
    assert np.array_equal(batch.noisy.ego_map[0], noisy0.ego_map)
    with tn.no_grad():
        z = teacher.map_encoder(clean0.ego_map[None]).data
    assert np.allclose(batch.z_teacher[0], z[0])


def test_default_actor_head_copied_encoders_fresh():
    teacher, student, _ = teacher_and_student()
    assert np.array_equal(student.heads.actor.layers[0].weight.data, teacher.heads.actor.layers[0].weight.data)
    assert not np.array_equal(student.map_encoder.proj.weight.data, teacher.map_encoder.proj.weight.data)


def test_self_distillation_fixed_point():
    teacher, student, cfg = teacher_and_student(init="teacher", alpha=0.25, beta=0.75)
    batch = collect_paired(make_vec(CLEAN_ENV, 2), student, teacher, 8, np.random.default_rng(0), cfg)
    loss, stats = student_loss(student, batch, cfg.alpha, cfg.beta)
    assert stats["fd_loss"] == pytest.approx(-1.0, abs=1e-9)
    assert stats["pd_loss"] == pytest.approx(0.0, abs=1e-12)
    assert stats["loss"] == pytest.approx(-0.25, abs=1e-9)
    # alpha = 0: the KL term sits at its minimum, so the gradient vanishes
    loss, _ = student_loss(student, batch, 0.0, 0.75)
    loss.backward()
    assert tn.global_grad_norm(student.paramset()) < 1e-9


def test_student_update_deterministic():
    def run():
        teacher, student, cfg = teacher_and_student(seed=2)
        batch = collect_paired(make_vec(NOISY_ENV, 2), student, teacher, 8, np.random.default_rng(3), cfg)
        params = student.paramset()
        stats = student_update(batch, student, params, cfg, 1e-3, np.random.default_rng(4))
        return params.checksum(), stats

    (a, sa), (b, sb) = run(), run()
    assert a == b and sa == sb


def test_student_update_reaches_all_trainable_parts():
    teacher, student, cfg = teacher_and_student(seed=2)
    batch = collect_paired(make_vec(NOISY_ENV, 2), student, teacher, 8, np.random.default_rng(3), cfg)
    loss, _ = student_loss(student, batch, cfg.alpha, cfg.beta)
    loss.backward()
    for part in (student.transform, student.map_encoder, student.laser_encoder, student.heads.actor):
        assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in part.parameters())


def test_student_loss_gradient_on_parameters():
    teacher, student, cfg = teacher_and_student(seed=5)
    batch = collect_paired(make_vec(NOISY_ENV, 2), student, teacher, 2, np.random.default_rng(3), cfg)
    targets = [("log_std", student.heads, "log_std"), ("bias", student.transform.mlp.layers[1], "bias")]
    for _, owner, attr in targets:
        original = getattr(owner, attr)

        def build(t):
            setattr(owner, attr, t)
            return student_loss(student, batch, 0.25, 0.75)[0]

        try:
            assert grad_check(build, [original.data.copy()]) < 1e-4
        finally:
            setattr(owner, attr, original)


def test_load_teacher_rejects_student(tmp_path):
    teacher, student, _ = teacher_and_student()
    path = tmp_path / "s.ckpt"
    save_policy(student, student.paramset(), path)
    with pytest.raises(ValueError):
        load_teacher(path)
    with pytest.raises(tn.CheckpointError):
        load_teacher(tmp_path / "missing.ckpt")


def test_train_student_end_to_end(tmp_path):
    teacher = build_network("teacher", SMALL, seed=0)
    tpath = tmp_path / "teacher.ckpt"
    save_policy(teacher, teacher.paramset(), tpath)
    before = tpath.read_bytes()
    run = StudentRunConfig(str(tpath), env=NOISY_ENV,
                           student=StudentConfig(nsteps=16, total_steps=96, nminibatch=2, nepochs=1),
                           seed=1, run_dir=str(tmp_path / "s"), checkpoint_every=2)
    final = train_student(run)
    with open(tmp_path / "s" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == METRIC_COLUMNS
    assert [int(r["steps"]) for r in rows] == [32, 64, 96]
    for r in rows:
        assert -1 <= float(r["mean_cosine"]) <= 1 and float(r["pd_loss"]) >= 0
    student, params = load_policy(final)
    assert student.kind == "student"
    assert params.metadata["alpha"] == 0.25 and params.metadata["teacher_checkpoint"] == str(tpath)
    assert tpath.read_bytes() == before
