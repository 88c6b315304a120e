"""Command-line entry point: ``navdistill <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from navdistill import tensornet as tn
from navdistill.gridworld import Scene, SceneError, bundled_scene, load_scene, save_scene
from navdistill.navenv import EnvConfig, load_env_config
from navdistill.evalkit.embeddings import export_embeddings
from navdistill.evalkit.metrics import BASELINE_INPUTS
from navdistill.evalkit.suites import (
    EASY_NOISE,
    HARD_NOISE,
    SUITE_IDS,
    TRAIN_NOISE,
    Setting,
    SuiteConfig,
    run_suite,
    suite_config,
    suite_from_snapshot,
)
from navdistill.policy import INPUT_MODES, NETWORKS
from navdistill.presets import PRESETS, get_preset
from navdistill.student import StudentConfig, StudentRunConfig, train_student
from navdistill.teacher import ContrastiveConfig, PPOConfig, TeacherRunConfig, train_teacher

log = logging.getLogger("navdistill")

_PPO = PPOConfig()
_NCE = ContrastiveConfig()
_STU = StudentConfig()


class UsageError(Exception):
    pass


def _read_json(path: str) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    return doc


def _override(obj, section: dict, label: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"config section {label!r}: unknown field(s) {sorted(unknown)}")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    return dataclasses.replace(obj, **fixed)


def _load_config(args, sections: tuple[str, ...]) -> dict:
    doc = _read_json(args.config) if args.config else {}
    unknown = set(doc) - set(sections)
    if unknown:
        raise UsageError(f"{args.config}: unknown section(s) {sorted(unknown)}; allowed: {list(sections)}")
    return doc


def _env_from(preset, doc: dict, base_dir: Path | None) -> EnvConfig:
    if "env" not in doc:
        return preset.env
    merged = {**preset.env.to_dict(), **doc["env"]}
    try:
        return EnvConfig.from_dict(merged, base_dir=base_dir)
    except (TypeError, ValueError, SceneError) as exc:
        raise UsageError(f"config section 'env': {exc}") from None


def _setup_logging(run_dir: Path, quiet: bool) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run_dir / "run.log")
    fh.setFormatter(fmt)
    root.addHandler(fh)
    if not quiet:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(fmt)
        root.addHandler(sh)


# -- subcommands ------------------------------------------------------------------------


def cmd_train_teacher(args) -> int:
    preset = get_preset(args.preset)
    doc = _load_config(args, ("env", "net", "ppo", "contrastive"))
    base = Path(args.config).parent if args.config else None
    env = _env_from(preset, doc, base)
    net = _override(preset.net, doc.get("net", {}), "net")
    ppo = _override(preset.ppo, doc.get("ppo", {}), "ppo")
    nce = _override(preset.contrastive, doc.get("contrastive", {}), "contrastive")
    if args.total_steps is not None:
        ppo = dataclasses.replace(ppo, total_steps=args.total_steps)
    if args.beta is not None:
        nce = dataclasses.replace(nce, beta=args.beta)
    if args.tau is not None:
        nce = dataclasses.replace(nce, tau=args.tau)
    if args.no_contrastive:
        nce = dataclasses.replace(nce, beta=0.0)
    input_mode = args.input_mode
    if args.clean_laser:
        input_mode = "teacher_clean_laser"
    if args.kind in ("map_laser", "pose_laser") and args.input_mode == "teacher":
        input_mode = "noisy"
    cfg = TeacherRunConfig(env=env.replace(seed=args.seed), net=net, ppo=ppo, contrastive=nce, kind=args.kind,
                           input_mode=input_mode, seed=args.seed, run_dir=args.run_dir,
                           checkpoint_every=args.checkpoint_every, resume=args.resume)
    _setup_logging(Path(args.run_dir), args.quiet)
    path = train_teacher(cfg)
    print(path)
    return 0


def cmd_train_student(args) -> int:
    preset = get_preset(args.preset)
    doc = _load_config(args, ("env", "student"))
    base = Path(args.config).parent if args.config else None
    env = _env_from(preset, doc, base)
    sc = _override(preset.student, doc.get("student", {}), "student")
    changes = {}
    if args.total_steps is not None:
        changes["total_steps"] = args.total_steps
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.beta is not None:
        changes["beta"] = args.beta
    if args.no_feature_distill:
        changes["alpha"] = 0.0
    if args.no_laser_fusion:
        changes["laser_fusion"] = False
    if args.init is not None:
        changes["init"] = args.init
    sc = dataclasses.replace(sc, **changes)
    teacher_meta = tn.read_checkpoint(args.teacher).metadata
    if args.no_contrastive_teacher and float(teacher_meta.get("beta_t", 1.0)) != 0.0:
        raise UsageError(f"--no-contrastive-teacher needs a teacher trained with beta 0; {args.teacher} "
                         f"was trained with beta {teacher_meta.get('beta_t')}")
    cfg = StudentRunConfig(teacher_checkpoint=args.teacher, env=env.replace(seed=args.seed + 17), student=sc,
                           seed=args.seed, run_dir=args.run_dir, checkpoint_every=args.checkpoint_every,
                           resume=args.resume)
    _setup_logging(Path(args.run_dir), args.quiet)
    print(train_student(cfg))
    return 0


def _seeds(seed: int, groups: int) -> tuple[int, ...]:
    return tuple(seed + i for i in range(groups))


def _run_and_print(suite: SuiteConfig, checkpoints: dict, out: Path, agents=None) -> int:
    report = run_suite(suite, checkpoints, out, agents=agents)
    for row in report.rows():
        print(" | ".join(row[:6]))
    print(out / "report.csv")
    return 0


def cmd_eval(args) -> int:
    if args.from_snapshot:
        suite, checkpoints = suite_from_snapshot(args.from_snapshot)
        return _run_and_print(suite, checkpoints, Path(args.out))
    if not args.agent:
        raise UsageError("eval needs --agent (or --from-snapshot)")
    preset = get_preset(args.preset)
    if args.env_config:
        env = load_env_config(args.env_config)
        settings = (Setting(f"custom: {Path(args.env_config).name}", env),)
    else:
        settings = suite_config(args.suite, preset).settings
    name = args.name or args.variant
    suite = SuiteConfig(args.suite if not args.env_config else "custom", settings, ((name, "agent", args.variant),),
                        args.episodes if args.episodes is not None else preset.eval_episodes,
                        _seeds(args.seed, args.seed_groups))
    if not Path(args.agent).is_file():
        raise FileNotFoundError(f"agent checkpoint not found: {args.agent}")
    _setup_logging(Path(args.out), True)
    return _run_and_print(suite, {"agent": args.agent}, Path(args.out))


def cmd_suite(args) -> int:
    if args.from_snapshot:
        suite, checkpoints = suite_from_snapshot(args.from_snapshot)
        return _run_and_print(suite, checkpoints, Path(args.out))
    if not args.suite:
        raise UsageError("suite needs a suite id (or --from-snapshot)")
    preset = get_preset(args.preset)
    suite = suite_config(args.suite, preset)
    suite = dataclasses.replace(suite, n_episodes=args.episodes if args.episodes is not None else suite.n_episodes,
                                seeds=_seeds(args.seed, args.seed_groups))
    checkpoints = {}
    if args.run_root:
        for key in suite.checkpoint_keys():
            p = Path(args.run_root) / key / "checkpoints" / "final.ckpt"
            if p.is_file():
                checkpoints[key] = str(p)
    for item in args.checkpoint or []:
        key, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--checkpoint expects KEY=PATH, got {item!r}")
        checkpoints[key] = path
    agents = args.agents.split(",") if args.agents else None
    _setup_logging(Path(args.out), True)
    return _run_and_print(suite, checkpoints, Path(args.out), agents)


NOISE_CHOICES = {"train": TRAIN_NOISE, "easy": EASY_NOISE, "hard": HARD_NOISE, "none": (0.0, 0.0, 0.0)}


def cmd_export_embeddings(args) -> int:
    preset = get_preset(args.preset)
    env = load_env_config(args.env_config) if args.env_config else preset.env.replace(
        noise=preset.noise(*NOISE_CHOICES[args.noise]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    print(export_embeddings(args.student, args.teacher, env.replace(seed=args.seed), args.samples, out))
    return 0


def cmd_make_scene(args) -> int:
    if args.from_bundled:
        scene = bundled_scene(args.from_bundled)
    else:
        w, h = args.size
        obstacles = []
        if args.obstacles:
            obstacles = [tuple(o) for o in json.loads(args.obstacles)]
        rng = np.random.default_rng(args.seed)
        t = args.wall_thickness
        for _ in range(args.random_obstacles):
            ow, oh = rng.uniform(0.2, 0.8, size=2)
            x = rng.uniform(t, w - t - ow)
            y = rng.uniform(t, h - t - oh)
            obstacles.append(tuple(round(float(v), 2) for v in (x, y, ow, oh)))
        scene = Scene(args.name, (w, h), tuple(obstacles), None, args.goal_count, t)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    load_scene(out)  # round-trip check
    print(out)
    return 0


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="navdistill", description="Teacher-student navigation lab.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_dir: str):
        sp.add_argument("--preset", choices=sorted(PRESETS), default="paper", help="base configuration")
        sp.add_argument("--config", help="JSON file with section overrides")
        sp.add_argument("--run-dir", default=run_dir, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--resume", help="checkpoint to continue from")
        sp.add_argument("--checkpoint-every", type=int, default=50, help="updates between checkpoints (0: final only)")
        sp.add_argument("--quiet", action="store_true", help="log to run.log only")

    t = sub.add_parser("train-teacher", help="PPO + InfoNCE teacher (or an RL baseline)", formatter_class=fmt)
    common(t, "runs/teacher")
    t.add_argument("--kind", choices=sorted(NETWORKS.keys() - {"student"}), default="teacher")
    t.add_argument("--input-mode", choices=sorted(INPUT_MODES), default="teacher",
                   help="observation sources; baselines switch to 'noisy' automatically")
    t.add_argument("--total-steps", type=int, default=None, help=f"environment steps (paper: {_PPO.total_steps})")
    t.add_argument("--beta", type=float, default=None, help=f"InfoNCE weight (paper: {_NCE.beta})")
    t.add_argument("--tau", type=float, default=None, help=f"InfoNCE temperature (paper: {_NCE.tau})")
    t.add_argument("--no-contrastive", action="store_true", help="train without InfoNCE (beta 0)")
    t.add_argument("--clean-laser", action="store_true", help="feed the teacher clean laser scans")
    t.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("train-student", help="distil a frozen teacher into a student", formatter_class=fmt)
    common(s, "runs/student")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    s.add_argument("--total-steps", type=int, default=None, help=f"environment steps (paper: {_STU.total_steps})")
    s.add_argument("--alpha", type=float, default=None, help=f"feature-distillation weight (paper: {_STU.alpha})")
    s.add_argument("--beta", type=float, default=None, help=f"policy-distillation weight (paper: {_STU.beta})")
    s.add_argument("--init", choices=("fresh", "teacher"), default=None, help="student encoder initialization")
    s.add_argument("--no-laser-fusion", action="store_true", help="transform sees the map feature only")
    s.add_argument("--no-feature-distill", action="store_true", help="alpha 0")
    s.add_argument("--no-contrastive-teacher", action="store_true",
                   help="assert the teacher was trained without InfoNCE")
    s.set_defaults(fn=cmd_train_student)

    def eval_common(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), default="paper")
        sp.add_argument("--episodes", type=int, default=None, help="episodes per cell (preset default: 100 paper)")
        sp.add_argument("--seed", type=int, default=0, help="first seed of the seed groups")
        sp.add_argument("--seed-groups", type=int, default=10)
        sp.add_argument("--out", default="runs/eval", help="report directory")
        sp.add_argument("--from-snapshot", help="re-run exactly from a snapshot.json")

    e = sub.add_parser("eval", help="evaluate one agent", formatter_class=fmt)
    eval_common(e)
    e.add_argument("--agent", help="agent checkpoint")
    e.add_argument("--variant", choices=sorted(BASELINE_INPUTS), default="student")
    e.add_argument("--name", help="display name in the report")
    e.add_argument("--suite", choices=SUITE_IDS, default="noise-hard")
    e.add_argument("--env-config", help="JSON environment config instead of a suite")
    e.set_defaults(fn=cmd_eval)

    u = sub.add_parser("suite", help="run a generalization suite over all agents", formatter_class=fmt)
    eval_common(u)
    u.add_argument("suite", nargs="?", choices=SUITE_IDS)
    u.add_argument("--run-root", help="directory holding <key>/checkpoints/final.ckpt")
    u.add_argument("--checkpoint", action="append", metavar="KEY=PATH",
                   help="agent checkpoint (keys: pose_laser, map_laser, teacher, student, student_no_feature, "
                        "student_no_contrastive)")
    u.add_argument("--agents", help="comma-separated subset (display names or keys)")
    u.set_defaults(fn=cmd_suite)

    x = sub.add_parser("export-embeddings", help="write label/noisy/transformed features to CSV", formatter_class=fmt)
    x.add_argument("--student", required=True)
    x.add_argument("--teacher", required=True)
    x.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    x.add_argument("--noise", choices=sorted(NOISE_CHOICES), default="hard")
    x.add_argument("--env-config")
    x.add_argument("--samples", type=int, default=1000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", default="runs/embeddings.csv")
    x.set_defaults(fn=cmd_export_embeddings)

    m = sub.add_parser("make-scene", help="write a scene JSON file", formatter_class=fmt)
    m.add_argument("--out", required=True)
    m.add_argument("--name", default="custom")
    m.add_argument("--size", type=float, nargs=2, metavar=("W", "H"), default=(8.08, 4.48))
    m.add_argument("--obstacles", help='JSON list of [x, y, w, h]')
    m.add_argument("--random-obstacles", type=int, default=0)
    m.add_argument("--goal-count", type=int, default=5)
    m.add_argument("--wall-thickness", type=float, default=0.04)
    m.add_argument("--from-bundled", help="copy a bundled scene instead")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_make_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, tn.CheckpointError, SceneError, KeyError, ValueError) as exc:
        print(f"navdistill: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
