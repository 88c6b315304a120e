"""Distilling a frozen teacher into a student that reads noisy observations."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from navdistill import tensornet as tn
from navdistill.navenv import EnvConfig, VecEnv, make_vec
from navdistill.policy import (
    INPUT_MODES,
    ObsBatch,
    PolicyNet,
    StudentNet,
    TeacherNet,
    act,
    build_inputs,
    build_network,
    load_policy,
    save_policy,
)
from navdistill.teacher import _append_metrics

log = logging.getLogger(__name__)


class TeacherMutatedError(RuntimeError):
    """The frozen teacher's parameters changed during student training."""


@dataclass(frozen=True)
class StudentConfig:
    alpha: float = 0.25
    beta: float = 0.75
    n_envs: int = 2
    total_steps: int = 1_000_000
    lr0: float = 2e-4
    nsteps: int = 256
    nepochs: int = 2
    nminibatch: int = 2
    max_grad_norm: float = 0.5
    laser_fusion: bool = True
    # fresh encoders by default; "teacher" copies encoders too and makes the transform identity-on-z
    init: str = "fresh"
    init_head_from_teacher: bool = True
    driver: str = "student"
    teacher_input_mode: str = "clean"

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.init not in ("fresh", "teacher"):
            raise ValueError(f"init must be 'fresh' or 'teacher', got {self.init!r}")
        if self.driver not in ("student", "teacher"):
            raise ValueError(f"driver must be 'student' or 'teacher', got {self.driver!r}")
        if self.teacher_input_mode not in INPUT_MODES:
            raise ValueError(f"unknown teacher input mode {self.teacher_input_mode!r}")


@dataclass
class DistillBatch:
    noisy: ObsBatch
    z_teacher: np.ndarray
    mu_teacher: np.ndarray
    std_teacher: np.ndarray
    value_teacher: np.ndarray

    def __len__(self) -> int:
        return len(self.z_teacher)

    def take(self, idx) -> "DistillBatch":
        return DistillBatch(self.noisy.take(idx), self.z_teacher[idx], self.mu_teacher[idx], self.std_teacher[idx],
                            self.value_teacher[idx])


def teacher_targets(teacher: PolicyNet, batch: ObsBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with tn.no_grad():
        mu, log_std, value, aux = teacher.forward(batch)
    std = np.broadcast_to(np.exp(log_std.data), mu.shape).copy()
    v = value.data if value is not None else np.zeros(len(mu), dtype=mu.dtype)
    return aux["z"].data, mu.data, std, v


class PairedCollector:
    """Steps a noisy vec-env with the student (or teacher) and records teacher targets on the clean twin."""

    def __init__(self, vec_env: VecEnv, cfg: StudentConfig = StudentConfig()):
        self.vec_env = vec_env
        self.cfg = cfg
        self.pairs = vec_env.reset_all()
        self.episodes: list[dict] = []

    def collect(self, student: StudentNet, teacher: PolicyNet, nsteps: int, rng: np.random.Generator) -> DistillBatch:
        noisy, zs, mus, stds, values = [], [], [], [], []
        for _ in range(nsteps):
            obs_s = build_inputs(self.pairs, "noisy")
            obs_t = build_inputs(self.pairs, self.cfg.teacher_input_mode)
            z, mu, std, v = teacher_targets(teacher, obs_t)
            if self.cfg.driver == "student":
                action = act(student, obs_s, "sample", rng)[0]
            else:
                action = act(teacher, obs_t, "sample", rng)[0]
            results = self.vec_env.step_all(action)
            noisy.append(obs_s)
            zs.append(z)
            mus.append(mu)
            stds.append(std)
            values.append(v)
            self.episodes.extend(res.info["episode"] for res in results if res.done)
            self.pairs = [(res.obs_noisy, res.obs_clean) for res in results]
        obs = ObsBatch(*(np.concatenate([getattr(b, f) for b in noisy]) for f in ("ego_map", "laser", "goal_vec", "pose")))
        return DistillBatch(obs, np.concatenate(zs), np.concatenate(mus), np.concatenate(stds), np.concatenate(values))


def collect_paired(vec_env: VecEnv | PairedCollector, student: StudentNet, teacher: PolicyNet, nsteps: int,
                   rng: np.random.Generator, cfg: StudentConfig = StudentConfig()) -> DistillBatch:
    collector = vec_env if isinstance(vec_env, PairedCollector) else PairedCollector(vec_env, cfg)
    return collector.collect(student, teacher, nsteps, rng)


# -- losses ---------------------------------------------------------------------


def _norms(x: np.ndarray, what: str) -> None:
    if np.any(np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1) == 0):
        raise ValueError(f"feature_distill_loss: {what} contains a zero-norm vector")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def feature_distill_loss(z_teacher, z_student) -> tn.Tensor:
    """Mean negative cosine similarity; the teacher side carries no gradient."""
    z_student = tn.as_tensor(z_student)
    z_t = np.asarray(z_teacher.data if isinstance(z_teacher, tn.Tensor) else z_teacher)
    if z_t.shape != z_student.shape or z_t.ndim != 2:
        raise tn.ShapeError(f"feature_distill_loss: shapes {z_t.shape} and {z_student.shape} must match (N, D)")
    _norms(z_t, "teacher")
    _norms(z_student.data, "student")
    t_unit = (z_t / np.linalg.norm(z_t, axis=-1, keepdims=True)).astype(z_student.dtype)
    cos = tn.tsum(tn.l2_normalize(z_student, axis=1, eps=0.0) * t_unit, axis=1)
    return -tn.mean(cos)


def policy_distill_loss(mu_teacher, std_teacher, mu_student, std_student) -> tn.Tensor:
    """Batch-mean closed-form ``KL(teacher || student)`` between diagonal Gaussians."""
    mu_s = tn.as_tensor(mu_student)
    std_s = tn.as_tensor(std_student, like=mu_s)
    mu_t = np.asarray(mu_teacher, dtype=mu_s.dtype)
    std_t = np.asarray(std_teacher, dtype=mu_s.dtype)
    if np.any(std_t <= 0) or np.any(std_s.data <= 0):
        raise ValueError("policy_distill_loss: standard deviations must be positive")
    if mu_s.ndim == 1:
        mu_s = mu_s.reshape(1, -1)
    if mu_t.ndim == 1:
        mu_t = mu_t[None]
    var_s = std_s * std_s
    kl = tn.log(std_s) - np.log(std_t) + (std_t ** 2 + (mu_s - mu_t) ** 2) / (var_s * 2.0) - 0.5
    kl = tn.as_tensor(kl)
    if kl.ndim == 1:
        kl = kl.reshape(1, -1)
    return tn.mean(tn.tsum(kl, axis=1))


def student_loss(student: StudentNet, batch: DistillBatch, alpha: float, beta: float) -> tuple[tn.Tensor, dict]:
    mu, log_std, _, aux = student.forward(batch.noisy)
    fd = feature_distill_loss(batch.z_teacher, aux["z"])
    pd = policy_distill_loss(batch.mu_teacher, batch.std_teacher, mu, tn.exp(log_std))
    loss = fd * alpha + pd * beta
    stats = {"fd_loss": float(fd.data), "pd_loss": float(pd.data), "loss": float(loss.data),
             "mean_cosine": float(-fd.data)}
    return loss, stats


def student_update(batch: DistillBatch, student: StudentNet, params: tn.ParamSet, cfg: StudentConfig, lr: float,
                   rng: np.random.Generator) -> dict:
    records = []
    n = len(batch)
    for _ in range(cfg.nepochs):
        for idx in np.array_split(rng.permutation(n), cfg.nminibatch):
            loss, stats = student_loss(student, batch.take(idx), cfg.alpha, cfg.beta)
            loss.backward()
            stats["grad_norm"] = tn.adam_step(params, lr, max_grad_norm=cfg.max_grad_norm)
            records.append(stats)
    return {k: float(np.mean([r[k] for r in records])) for k in records[0]}


# -- training driver ---------------------------------------------------------------


METRIC_COLUMNS = ("update_index", "fd_loss", "pd_loss", "mean_cosine", "lr", "steps", "success_rate", "wall_time")


@dataclass
class StudentRunConfig:
    teacher_checkpoint: str
    env: EnvConfig = field(default_factory=EnvConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    seed: int = 0
    run_dir: str = "runs/student"
    checkpoint_every: int = 50
    resume: str | None = None

    def to_dict(self) -> dict:
        return {"teacher_checkpoint": self.teacher_checkpoint, "env": self.env.to_dict(),
                "student": dataclasses.asdict(self.student), "seed": self.seed, "run_dir": self.run_dir,
                "checkpoint_every": self.checkpoint_every, "resume": self.resume}


def load_teacher(path) -> PolicyNet:
    teacher, _ = load_policy(path)
    if not isinstance(teacher, TeacherNet):
        raise ValueError(f"{path}: expected a teacher checkpoint, found kind {teacher.kind!r}")
    return teacher  # only ever evaluated under no_grad


def make_student(teacher: TeacherNet, cfg: StudentConfig, seed: int) -> StudentNet:
    student = build_network("student", teacher.cfg, seed=seed, dtype=teacher.heads.log_std.dtype,
                            laser_fusion=cfg.laser_fusion)
    if cfg.init == "teacher":
        student.init_from_teacher(teacher)
    elif cfg.init_head_from_teacher:
        student.init_head_from_teacher(teacher)
    return student


def train_student(cfg: StudentRunConfig) -> Path:
    run_dir = Path(cfg.run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
    teacher = load_teacher(cfg.teacher_checkpoint)
    teacher_sum = teacher.paramset().checksum()
    if cfg.resume:
        student, params = load_policy(cfg.resume)
        step = int(params.metadata.get("global_step", 0))
        update_index = int(params.metadata.get("update_index", 0))
    else:
        student = make_student(teacher, cfg.student, cfg.seed)
        params = student.paramset()
        step = update_index = 0
    rng = np.random.default_rng([cfg.seed, update_index])
    sc = cfg.student
    collector = PairedCollector(make_vec(cfg.env.replace(seed=cfg.env.seed + 1000 * update_index), sc.n_envs), sc)
    metrics_path = run_dir / "metrics.csv"
    t0 = time.time()

    def save(tag: str) -> Path:
        path = run_dir / "checkpoints" / f"{tag}.ckpt"
        save_policy(student, params, path, {"global_step": step, "update_index": update_index,
                                            "alpha": sc.alpha, "beta": sc.beta,
                                            "teacher_checkpoint": str(cfg.teacher_checkpoint)})
        return path

    while step < sc.total_steps:
        lr = tn.lr_schedule(step, sc.total_steps, sc.lr0)
        batch = collector.collect(student, teacher, sc.nsteps, rng)
        stats = student_update(batch, student, params, sc, lr, rng)
        step += sc.nsteps * sc.n_envs
        update_index += 1
        recent = collector.episodes[-100:]
        row = {"update_index": update_index, "lr": lr, "steps": step, "wall_time": round(time.time() - t0, 1),
               "success_rate": float(np.mean([e["success"] for e in recent])) if recent else float("nan"), **stats}
        _append_metrics(metrics_path, METRIC_COLUMNS, row)
        log.info("student update %d step %d fd %.3f pd %.3f cos %.3f", update_index, step, stats["fd_loss"],
                 stats["pd_loss"], stats["mean_cosine"])
        if cfg.checkpoint_every and update_index % cfg.checkpoint_every == 0:
            save(f"update_{update_index:05d}")
    if teacher.paramset().checksum() != teacher_sum:
        raise TeacherMutatedError("teacher parameters changed during distillation")
    return save("final")
