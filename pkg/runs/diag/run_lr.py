"""Diagnostic: desk students with a 5x learning rate; not part of the package."""
import dataclasses, logging, os, shutil
from pathlib import Path
from navdistill.presets import get_preset
from navdistill.evalkit import desk

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
root = Path("runs/diag/lr1e-3")
(root / "teacher" / "checkpoints").mkdir(parents=True, exist_ok=True)
src = Path("runs/desk/teacher/checkpoints/final.ckpt")
dst = root / "teacher" / "checkpoints" / "final.ckpt"
if not dst.exists():
    shutil.copy(src, dst)
p = get_preset("desk")
p = p.replace(student=dataclasses.replace(p.student, lr0=1e-3))
desk.run_pipeline(root, p, stages=("student", "student_no_fusion"))
