"""Generalization suites (speed, noise, scene, ablation) and the comparison report."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from navdistill.gridworld import bundled_scene
from navdistill.navenv import EnvConfig, NoiseModel
from navdistill.evalkit.metrics import EvalResult, Summary, evaluate, load_agent, write_episodes
from navdistill.presets import Preset, get_preset

FULL_SPEED = (1.0, 1.0, math.pi / 4)
SLOW_SPEED = (0.5, 0.5, math.pi / 6)
TRAIN_NOISE = (0.5, 0.1, 0.1)
EASY_NOISE = (0.25, 0.05, 0.05)
HARD_NOISE = (0.75, 0.15, 0.15)

REPORT_COLUMNS = ("Setting", "Methods", "Success(%)", "Activation", "Collision(s)", "NavTime(s)",
                  "Success SE(%)", "Activation std", "Collision std(s)", "NavTime std(s)", "Episodes")
REPORT_FOOTER = "# Activation is averaged over all episodes, successful and failed."

# (display name, checkpoint key, agent variant)
STANDARD_AGENTS = (
    ("Pose + Laser", "pose_laser", "pose_laser"),
    ("Map + Laser", "map_laser", "map_laser"),
    ("Teacher", "teacher", "teacher_zero_shot"),
    ("Ours", "student", "student"),
)
ABLATION_AGENTS = (
    ("w/o ft. distill", "student_no_feature", "student"),
    ("w/o cont.", "student_no_contrastive", "student"),
    ("Ours", "student", "student"),
)


def _num(v: float) -> str:
    return f"{v:g}"


def _angle(w: float) -> str:
    for k in range(1, 13):
        if abs(w - math.pi / k) < 1e-9:
            return "π" if k == 1 else f"π/{k}"
    return _num(w)


def speed_header(limit: Sequence[float]) -> str:
    vx, vy, w = limit
    return f"v_x = {_num(vx)}m/s, v_y = {_num(vy)}m/s, ω = {_angle(w)} rad/s"


def noise_header(noise: NoiseModel) -> str:
    def u(b: float) -> str:
        return f"U(−{_num(b)}, {_num(b)})"

    return f"δ^shift ∼ {u(noise.shift_bound)}, δ^p_t ∼ {u(noise.pose_bound)}, δ^l_t ∼ {u(noise.laser_bound)}"


@dataclass(frozen=True)
class Setting:
    header: str
    env: EnvConfig


@dataclass(frozen=True)
class SuiteConfig:
    suite_id: str
    settings: tuple[Setting, ...]
    agents: tuple[tuple[str, str, str], ...]
    n_episodes: int = 100
    seeds: tuple[int, ...] = tuple(range(10))

    @property
    def headers(self) -> list[str]:
        return [s.header for s in self.settings]

    def checkpoint_keys(self) -> list[str]:
        return [key for _, key, _ in self.agents]


def _noise_setting(preset: Preset, base: EnvConfig, bounds) -> Setting:
    noise = preset.noise(*bounds)
    return Setting(noise_header(noise), base.replace(noise=noise))


def suite_config(suite_id: str, preset: Preset | str = "paper") -> SuiteConfig:
    preset = get_preset(preset) if isinstance(preset, str) else preset
    base = preset.env.replace(speed_limit=FULL_SPEED, noise=preset.noise(*TRAIN_NOISE),
                              episode_steps=preset.eval_episode_steps)
    common = {"n_episodes": preset.eval_episodes, "seeds": preset.eval_seeds}
    if suite_id == "speed":
        settings = tuple(Setting(speed_header(v), base.replace(speed_limit=v)) for v in (FULL_SPEED, SLOW_SPEED))
        return SuiteConfig("speed", settings, STANDARD_AGENTS, **common)
    if suite_id in ("noise", "noise-easy", "noise-hard"):
        bounds = {"noise": (EASY_NOISE, HARD_NOISE), "noise-easy": (EASY_NOISE,), "noise-hard": (HARD_NOISE,)}
        settings = tuple(_noise_setting(preset, base, b) for b in bounds[suite_id])
        return SuiteConfig(suite_id, settings, STANDARD_AGENTS, **common)
    if suite_id == "scene":
        env = base.replace(scene=bundled_scene(preset.test_scene))
        return SuiteConfig("scene", (Setting("Performance on Test Scene", env),), STANDARD_AGENTS, **common)
    if suite_id == "ablation":
        return SuiteConfig("ablation", (_noise_setting(preset, base, HARD_NOISE),), ABLATION_AGENTS, **common)
    raise KeyError(f"unknown suite {suite_id!r}; choose from {sorted(SUITE_IDS)}")


SUITE_IDS = ("speed", "noise", "noise-easy", "noise-hard", "scene", "ablation")


# -- running & reporting -------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class SuiteReport:
    suite: SuiteConfig
    results: dict[str, list[tuple[str, EvalResult]]] = field(default_factory=dict)

    def rows(self) -> list[list[str]]:
        out = []
        for header, entries in self.results.items():
            for name, res in entries:
                s: Summary = res.summary
                out.append([header, name, f"{100 * s.success_rate:.1f}", f"{s.activation:.2f}",
                            f"{s.collision_time:.2f}", f"{s.nav_time:.2f}", f"{100 * s.success_rate_se:.1f}",
                            f"{s.activation_std:.2f}", f"{s.collision_time_std:.2f}", f"{s.nav_time_std:.2f}",
                            str(s.n)])
        return out


def _csv_line(cells: Sequence[str]) -> str:
    return ",".join(f'"{c}"' if ("," in c or '"' in c) else c for c in cells)


def write_report(path: str | Path, report: SuiteReport) -> Path:
    """Atomic write: either the whole report appears or nothing does."""
    path = Path(path)
    lines = [_csv_line(REPORT_COLUMNS)] + [_csv_line(r) for r in report.rows()] + [REPORT_FOOTER]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def run_suite(suite: SuiteConfig | str, checkpoints: dict[str, str | Path], out_dir: str | Path | None = None,
              preset: Preset | str = "paper", agents: Sequence[str] | None = None) -> SuiteReport:
    """Evaluates each configured agent in each setting. ``agents`` optionally restricts by display name."""
    suite = suite_config(suite, preset) if isinstance(suite, str) else suite
    chosen = [a for a in suite.agents if agents is None or a[0] in agents or a[1] in agents]
    if not chosen:
        raise ValueError(f"no agents selected for suite {suite.suite_id!r}")
    missing = [key for _, key, _ in chosen if key not in checkpoints or not Path(checkpoints[key]).is_file()]
    if missing:
        raise FileNotFoundError(f"suite {suite.suite_id!r}: missing checkpoints for {', '.join(missing)}")
    loaded = [(name, load_agent(checkpoints[key], variant, name)) for name, key, variant in chosen]
    report = SuiteReport(suite)
    for setting in suite.settings:
        report.results[setting.header] = [
            (name, evaluate(agent, setting.env, suite.n_episodes, suite.seeds)) for name, agent in loaded
        ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "suite": suite.suite_id,
            "n_episodes": suite.n_episodes,
            "seeds": list(suite.seeds),
            "settings": [{"header": s.header, "env": s.env.to_dict()} for s in suite.settings],
            "agents": [{"name": n, "key": k, "variant": v, "checkpoint": str(checkpoints[k]),
                        "sha256": file_digest(checkpoints[k])} for n, k, v in chosen],
        }
        (out / "snapshot.json").write_text(json.dumps(snapshot, indent=2, ensure_ascii=False), encoding="utf-8")
        episodes = out / "episodes.csv"
        if episodes.exists():
            episodes.unlink()
        for header, entries in report.results.items():
            write_episodes(episodes, [r for _, r in entries], setting=header)
        write_report(out / "report.csv", report)
    return report


def suite_from_snapshot(path: str | Path) -> tuple[SuiteConfig, dict[str, str]]:
    """Rebuilds the exact suite (settings, seeds, agents) recorded by :func:`run_suite`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    base = Path(path).parent
    settings = tuple(Setting(s["header"], EnvConfig.from_dict(s["env"], base_dir=base)) for s in doc["settings"])
    agents = tuple((a["name"], a["key"], a["variant"]) for a in doc["agents"])
    checkpoints = {}
    for a in doc["agents"]:
        if file_digest(a["checkpoint"]) != a["sha256"]:
            raise ValueError(f"checkpoint {a['checkpoint']} changed since the snapshot was taken")
        checkpoints[a["key"]] = a["checkpoint"]
    return SuiteConfig(doc["suite"], settings, agents, doc["n_episodes"], tuple(doc["seeds"])), checkpoints
