"""Reduced-scale reproduction pipeline; each stage is skipped when its checkpoint already exists."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

from navdistill.presets import Preset, desk_preset
from navdistill.student import StudentRunConfig, train_student
from navdistill.teacher import TeacherRunConfig, train_teacher

log = logging.getLogger(__name__)

# One teacher and three students: full, no laser fusion, no feature distillation.
STUDENT_VARIANTS = {
    "student": {},
    "student_no_fusion": {"laser_fusion": False},
    "student_no_feature": {"alpha": 0.0},
}


def teacher_config(preset: Preset, root: Path, seed: int = 0) -> TeacherRunConfig:
    return TeacherRunConfig(env=preset.env, net=preset.net, ppo=preset.ppo, contrastive=preset.contrastive,
                            seed=seed, run_dir=str(root / "teacher"))


def student_config(preset: Preset, root: Path, variant: str, seed: int = 0) -> StudentRunConfig:
    sc = dataclasses.replace(preset.student, **STUDENT_VARIANTS[variant])
    return StudentRunConfig(teacher_checkpoint=str(root / "teacher" / "checkpoints" / "final.ckpt"),
                            env=preset.env.replace(seed=preset.env.seed + 17), student=sc, seed=seed,
                            run_dir=str(root / variant))


def final_checkpoint(root: Path, name: str) -> Path:
    return Path(root) / name / "checkpoints" / "final.ckpt"


def run_pipeline(root: str | Path, preset: Preset | None = None, stages=("teacher", *STUDENT_VARIANTS)) -> dict:
    """Train whatever is missing under ``root``; returns stage name -> final checkpoint."""
    root = Path(root)
    preset = preset or desk_preset()
    out = {}
    for stage in stages:
        ckpt = final_checkpoint(root, stage)
        if not ckpt.exists():
            log.info("training %s under %s", stage, root)
            run_dir = root / stage
            if (run_dir / "metrics.csv").exists():
                (run_dir / "metrics.csv").unlink()  # stale log from an interrupted run
            if stage == "teacher":
                train_teacher(teacher_config(preset, root))
            else:
                train_student(student_config(preset, root, stage))
        out[stage] = ckpt
    return out


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run_pipeline(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
