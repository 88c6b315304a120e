"""Feature export for external projection (t-SNE etc.)."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from navdistill import tensornet as tn
from navdistill.navenv import EnvConfig, make_vec
from navdistill.policy import StudentNet, act, build_inputs, load_policy
from navdistill.student import load_teacher

EMBEDDING_TYPES = ("label", "noisy", "transformed")


def collect_embeddings(student: StudentNet, teacher, env_config: EnvConfig, n_samples: int, n_envs: int = 4):
    """Drives the student (mean actions) and returns ``(z, z_hat, z_tilde)``, each ``(n_samples, d)``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vec = make_vec(env_config, min(n_envs, n_samples))
    pairs = vec.reset_all()
    zs, zh, zt = [], [], []
    collected = 0
    while collected < n_samples:
        noisy = build_inputs(pairs, "noisy")
        with tn.no_grad():
            _, _, _, t_aux = teacher.forward(build_inputs(pairs, "clean"))
            _, _, _, s_aux = student.forward(noisy)
        zs.append(t_aux["z"].data)
        zh.append(s_aux["z_hat"].data)
        zt.append(s_aux["z"].data)
        collected += len(pairs)
        results = vec.step_all(act(student, noisy, "mean")[0])
        pairs = [(r.obs_noisy, r.obs_clean) for r in results]
    return tuple(np.concatenate(a)[:n_samples] for a in (zs, zh, zt))


def export_embeddings(student_checkpoint, teacher_checkpoint, env_config: EnvConfig, n_samples: int,
                      path: str | Path) -> Path:
    student, _ = load_policy(student_checkpoint)
    if not isinstance(student, StudentNet):
        raise ValueError(f"{student_checkpoint}: not a student checkpoint")
    teacher = load_teacher(teacher_checkpoint)
    feats = collect_embeddings(student, teacher, env_config, n_samples)
    d = feats[0].shape[1]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type", *(f"f{i}" for i in range(d))])
        for kind, block in zip(EMBEDDING_TYPES, feats):
            for row in block:
                writer.writerow([kind, *(repr(float(v)) for v in row)])
    os.replace(tmp, path)
    return path
