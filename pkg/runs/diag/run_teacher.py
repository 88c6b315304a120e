"""Diagnostic: desk teacher at lr 1e-3; not part of the package."""
import dataclasses, logging
from pathlib import Path
from navdistill.presets import get_preset
from navdistill.evalkit import desk

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
p = get_preset("desk")
p = p.replace(ppo=dataclasses.replace(p.ppo, lr0=1e-3))
desk.run_pipeline(Path("runs/diag/t_lr1e-3"), p, stages=("teacher",))
