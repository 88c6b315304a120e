"""Episode metrics, agents and batched deterministic evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from navdistill.gridworld import Pose, rasterize
from navdistill.navenv import EnvConfig, NavEnv, Observation
from navdistill.policy import PolicyNet, act, build_inputs, load_policy

METRIC_NAMES = ("success", "activation_count", "collision_time", "nav_time")


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    activation_count: int
    nav_time: float
    collision_time: float
    steps: int = 0
    seed: int = 0
    episode: int = 0

    @classmethod
    def from_state(cls, env: NavEnv, seed: int = 0, episode: int = 0) -> "EpisodeMetrics":
        st = env.state
        dt = env.config.dt
        horizon = env.config.episode_steps * dt
        success = st.all_reached
        nav_time = st.last_activation_step * dt if success else horizon
        return cls(success, st.active_goal, nav_time, st.collision_steps * dt, st.step_count, seed, episode)


# -- agents ------------------------------------------------------------------------


class Agent:
    """Maps a list of ``(noisy, clean)`` observation pairs to an ``(n, 3)`` action array."""

    name = "agent"

    def act(self, pairs: Sequence[tuple[Observation, Observation]]) -> np.ndarray:
        raise NotImplementedError


class PolicyAgent(Agent):
    def __init__(self, net: PolicyNet, input_mode: str = "noisy", name: str | None = None):
        self.net = net
        self.input_mode = input_mode
        self.name = name or net.kind

    def act(self, pairs):
        return act(self.net, build_inputs(pairs, self.input_mode), "mean")[0]


class ScriptedAgent(Agent):
    """Wraps ``fn(noisy_obs, clean_obs) -> action``."""

    def __init__(self, fn: Callable[[Observation, Observation], Sequence[float]], name: str = "scripted"):
        self.fn = fn
        self.name = name

    def act(self, pairs):
        return np.array([self.fn(noisy, clean) for noisy, clean in pairs], dtype=np.float64).reshape(len(pairs), 3)


# variant -> how the checkpoint's network is fed at evaluation time
BASELINE_INPUTS = {
    "pose_laser": "noisy",
    "map_laser": "noisy",
    "teacher_zero_shot": "noisy",
    "student": "noisy",
    "teacher_clean": "teacher",
}


def load_agent(path: str | Path, variant: str = "student", name: str | None = None) -> PolicyAgent:
    if variant not in BASELINE_INPUTS:
        raise ValueError(f"unknown agent variant {variant!r}; choose from {sorted(BASELINE_INPUTS)}")
    net, _ = load_policy(path)
    expected = {"pose_laser": ("pose_laser",), "student": ("student",)}.get(variant, ("teacher",))
    if net.kind not in expected:
        raise ValueError(f"{path}: variant {variant!r} needs a {expected[0]} network, found {net.kind!r}")
    return PolicyAgent(net, BASELINE_INPUTS[variant], name or variant)


# -- evaluation --------------------------------------------------------------------------


def run_episode(env: NavEnv, agent: Agent, seed: int | None = None, start: Pose | None = None,
                goals=None) -> EpisodeMetrics:
    pair = env.reset(seed, start=start, goals=goals)
    while True:
        res = env.step(agent.act([pair])[0])
        if res.done:
            return EpisodeMetrics.from_state(env, seed or 0)
        pair = (res.obs_noisy, res.obs_clean)


def episode_seeds(n_episodes: int, seeds: Sequence[int]) -> list[tuple[int, int]]:
    """Splits ``n_episodes`` across seed groups as evenly as possible: ``[(seed, count), ...]``."""
    seeds = list(seeds)
    if not seeds or n_episodes < 1:
        raise ValueError("need at least one seed and one episode")
    base, extra = divmod(n_episodes, len(seeds))
    return [(s, base + (i < extra)) for i, s in enumerate(seeds) if base + (i < extra) > 0]


def evaluate_episodes(agent: Agent, env_config: EnvConfig, n_episodes: int = 100,
                      seeds: Sequence[int] = tuple(range(10))) -> list[EpisodeMetrics]:
    """Every episode in a seed group runs in lock-step so the agent sees one batch per step."""
    grid = rasterize(env_config.scene, env_config.resolution)
    rows: list[EpisodeMetrics] = []
    for seed, count in episode_seeds(n_episodes, seeds):
        children = np.random.SeedSequence(seed).spawn(count)
        envs = []
        for child in children:
            env = NavEnv(env_config, grid)
            env._rng = np.random.default_rng(child)
            envs.append(env)
        pairs = [env.reset() for env in envs]
        active = list(range(count))
        while active:
            actions = agent.act([pairs[i] for i in active])
            still = []
            for i, a in zip(active, actions):
                res = envs[i].step(a)
                if res.done:
                    rows.append(EpisodeMetrics.from_state(envs[i], seed, i))
                else:
                    pairs[i] = (res.obs_noisy, res.obs_clean)
                    still.append(i)
            active = still
    return sorted(rows, key=lambda r: (r.seed, r.episode))


@dataclass(frozen=True)
class Summary:
    n: int
    success_rate: float
    success_rate_se: float
    activation: float
    activation_std: float
    collision_time: float
    collision_time_std: float
    nav_time: float
    nav_time_std: float

    @classmethod
    def of(cls, rows: Sequence[EpisodeMetrics]) -> "Summary":
        if not rows:
            raise ValueError("no episodes to summarize")
        s = np.array([r.success for r in rows], dtype=np.float64)
        a = np.array([r.activation_count for r in rows], dtype=np.float64)
        c = np.array([r.collision_time for r in rows])
        t = np.array([r.nav_time for r in rows])
        n = len(rows)
        return cls(n, float(s.mean()), float(math.sqrt(s.mean() * (1 - s.mean()) / n)), float(a.mean()),
                   float(a.std()), float(c.mean()), float(c.std()), float(t.mean()), float(t.std()))


@dataclass
class EvalResult:
    agent: str
    rows: list[EpisodeMetrics]

    @property
    def summary(self) -> Summary:
        return Summary.of(self.rows)


def evaluate(agent: Agent, env_config: EnvConfig, n_episodes: int = 100,
             seeds: Sequence[int] = tuple(range(10))) -> EvalResult:
    return EvalResult(agent.name, evaluate_episodes(agent, env_config, n_episodes, seeds))


EPISODE_COLUMNS = ("agent", "seed", "episode", "success", "activation_count", "nav_time", "collision_time", "steps")


def write_episodes(path: str | Path, results: Sequence[EvalResult], setting: str | None = None) -> None:
    columns = (("setting",) if setting is not None else ()) + EPISODE_COLUMNS
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if new:
            writer.writeheader()
        for res in results:
            for r in res.rows:
                row = {"agent": res.agent, **asdict(r)}
                row["success"] = int(r.success)
                if setting is not None:
                    row["setting"] = setting
                writer.writerow(row)
