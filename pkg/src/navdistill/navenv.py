"""Multi-goal navigation environment with paired clean/noisy observations."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from navdistill.gridworld import (
    OccupancyGrid,
    Pose,
    Scene,
    _scan,
    bundled_scene,
    check_collision,
    crop_egocentric,
    load_scene,
    rasterize,
    ray_offsets,
    scene_from_dict,
    wrap_angle,
)

R_STEP = -0.01
R_COLLISION = -0.05
R_GOAL = 4.0

GOAL_VEC_CLIP = 4.0


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Uniform pose/laser perturbations.

    ``shift_bound`` is the half-width of the per-episode offset added to
    (x, y, yaw); ``pose_bound`` the per-step offset; ``laser_bound`` the
    per-ray offset in normalized range units.
    """

    shift_bound: float = 0.5
    pose_bound: float = 0.1
    laser_bound: float = 0.1
    yaw_noise: bool = True

    def __post_init__(self) -> None:
        for name in ("shift_bound", "pose_bound", "laser_bound"):
            if getattr(self, name) < 0:
                raise ValueError(f"NoiseModel.{name} must be >= 0")

    @classmethod
    def clean(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0)

    def scaled(self, factor: float) -> "NoiseModel":
        return dataclasses.replace(self, shift_bound=self.shift_bound * factor,
                                   pose_bound=self.pose_bound * factor, laser_bound=self.laser_bound * factor)


@dataclass(frozen=True)
class EnvConfig:
    scene: Scene = field(default_factory=lambda: bundled_scene("train"))
    noise: NoiseModel = field(default_factory=NoiseModel)
    dt: float = 0.04
    episode_steps: int = 500
    speed_limit: tuple[float, float, float] = (2.0, 2.0, math.pi / 4)
    goal_radius: float = 0.30
    robot_radius: float = 0.18
    resolution: float = 0.04
    window_extent: float = 2.56
    n_rays: int = 60
    fov: float = math.radians(270.0)
    max_range: float = 5.0
    goal_sigma: float = 0.1
    seed: int = 0
    max_sample_tries: int = 1000

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        if len(self.speed_limit) != 3 or min(self.speed_limit) <= 0:
            raise ValueError("speed_limit must be three positive values")
        object.__setattr__(self, "speed_limit", tuple(float(v) for v in self.speed_limit))
        if self.goal_radius <= 0 or self.robot_radius <= 0:
            raise ValueError("goal_radius and robot_radius must be > 0")

    def replace(self, **changes: Any) -> "EnvConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["scene"] = self.scene.to_dict()
        out["noise"] = dataclasses.asdict(self.noise)
        out["speed_limit"] = list(self.speed_limit)
        return out

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "EnvConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown EnvConfig field(s): {sorted(unknown)}")
        scene = doc.pop("scene", None)
        if isinstance(scene, str):
            path = Path(scene)
            if not path.suffix:
                doc["scene"] = bundled_scene(scene)
            else:
                doc["scene"] = load_scene(path if path.is_absolute() or base_dir is None else base_dir / path)
        elif isinstance(scene, dict):
            doc["scene"] = scene_from_dict(scene)
        if "noise" in doc:
            doc["noise"] = NoiseModel(**doc["noise"])
        if "speed_limit" in doc:
            doc["speed_limit"] = tuple(doc["speed_limit"])
        return cls(**doc)


def load_env_config(path: str | Path) -> EnvConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: parse error: {exc.msg}") from None
    return EnvConfig.from_dict(doc, base_dir=path.parent)


@dataclass(frozen=True, eq=False)
class Observation:
    laser: np.ndarray
    ego_map: np.ndarray
    goal_vec: np.ndarray
    pose_estimate: Pose

    def equals(self, other: "Observation") -> bool:
        return (
            np.array_equal(self.laser, other.laser)
            and np.array_equal(self.ego_map, other.ego_map)
            and np.array_equal(self.goal_vec, other.goal_vec)
            and self.pose_estimate == other.pose_estimate
        )


@dataclass
class RobotState:
    pose: Pose
    goals: list[tuple[float, float]]
    active_goal: int = 0
    step_count: int = 0
    collision_steps: int = 0
    episode_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    last_activation_step: int | None = None

    @property
    def all_reached(self) -> bool:
        return self.active_goal >= len(self.goals)


@dataclass(frozen=True, eq=False)
class StepResult:
    obs_noisy: Observation
    obs_clean: Observation
    reward: float
    reward_breakdown: tuple[float, float, float, float]
    done: bool
    info: dict


def goal_vector(pose: Pose, goal: Sequence[float] | None) -> np.ndarray:
    """Active goal in the robot frame, clipped to +-4 m and scaled to [-1, 1]."""
    if goal is None:
        return np.zeros(2, dtype=np.float32)
    dx, dy = goal[0] - pose.x, goal[1] - pose.y
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rel = np.array([c * dx + s * dy, -s * dx + c * dy])
    return (np.clip(rel, -GOAL_VEC_CLIP, GOAL_VEC_CLIP) / GOAL_VEC_CLIP).astype(np.float32)


class NavEnv:
    """Single navigation environment. Call :meth:`reset` before :meth:`step`."""

    def __init__(self, config: EnvConfig, grid: OccupancyGrid | None = None):
        self.config = config
        self.grid = grid if grid is not None else rasterize(config.scene, config.resolution)
        self._offsets = ray_offsets(config.n_rays, config.fov)
        self._rng = np.random.default_rng(config.seed)
        self.state: RobotState | None = None
        self.done = True
        self._noisy_pose: Pose | None = None
        self._scan_buf = np.empty(config.n_rays)

    # -- sampling -------------------------------------------------------------

    def _sample_free_point(self, taken: list[tuple[float, float]], clearance: float) -> tuple[float, float]:
        cfg = self.config
        x0, y0, w, h = cfg.scene.spawn_region
        for _ in range(cfg.max_sample_tries):
            x = x0 + self._rng.random() * w
            y = y0 + self._rng.random() * h
            if check_collision(self.grid, Pose(x, y), cfg.robot_radius):
                continue
            if all(math.hypot(x - tx, y - ty) >= clearance for tx, ty in taken):
                return (x, y)
        raise EnvError(f"scene {cfg.scene.name!r}: could not place a free point after {cfg.max_sample_tries} tries")

    def reset(self, seed: int | None = None, start: Pose | None = None,
              goals: Sequence[tuple[float, float]] | None = None) -> tuple[Observation, Observation]:
        """New episode. ``start``/``goals`` pin the layout instead of sampling it (noise is still drawn)."""
        cfg = self.config
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        clearance = 2.0 * cfg.goal_radius
        if start is None:
            sx, sy = self._sample_free_point([], clearance)
        if goals is None:
            anchor = [(sx, sy)] if start is None else [(start.x, start.y)]
            sampled: list[tuple[float, float]] = []
            for _ in range(cfg.scene.goal_count):
                sampled.append(self._sample_free_point(anchor + sampled, clearance))
            goals = sampled
        goals = [(float(g[0]), float(g[1])) for g in goals]
        if start is None:
            yaw = math.pi - self._rng.random() * 2.0 * math.pi
            start = Pose(sx, sy, yaw)
        s = cfg.noise.shift_bound
        shift = tuple(float(v) for v in self._rng.uniform(-s, s, size=3))
        if not cfg.noise.yaw_noise:
            shift = (shift[0], shift[1], 0.0)
        self.state = RobotState(pose=start, goals=goals, episode_shift=shift)
        self.done = False
        self._prev_dist = self._goal_distance()
        return self._emit()

    # -- dynamics -------------------------------------------------------------

    def _goal_distance(self) -> float:
        st = self.state
        if st.all_reached:
            return 0.0
        gx, gy = st.goals[st.active_goal]
        return math.hypot(gx - st.pose.x, gy - st.pose.y)

    def clamp_action(self, action: Sequence[float]) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(3)
        limit = np.asarray(self.config.speed_limit)
        return np.clip(a, -limit, limit)

    def step(self, action: Sequence[float]) -> StepResult:
        if self.state is None or self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        cfg = self.config
        st = self.state
        vx, vy, omega = self.clamp_action(action)
        pose = st.pose
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        nx = pose.x + (vx * c - vy * s) * cfg.dt
        ny = pose.y + (vx * s + vy * c) * cfg.dt
        nyaw = pose.yaw + omega * cfg.dt
        collision = check_collision(self.grid, Pose(nx, ny), cfg.robot_radius)
        if collision:
            st.pose = Pose(pose.x, pose.y, nyaw)
            st.collision_steps += 1
        else:
            st.pose = Pose(nx, ny, nyaw)
        st.step_count += 1

        dist = self._goal_distance()
        delta_d = self._prev_dist - dist
        r_goal = 0.0
        goal_activated = False
        if dist < cfg.goal_radius:
            r_goal = R_GOAL
            goal_activated = True
            st.active_goal += 1
            st.last_activation_step = st.step_count
            dist = self._goal_distance()
        self._prev_dist = dist
        r_col = R_COLLISION if collision else 0.0
        breakdown = (R_STEP, r_col, r_goal, delta_d)
        reward = R_STEP + r_col + r_goal + delta_d
        self.done = st.all_reached or st.step_count >= cfg.episode_steps
        obs_noisy, obs_clean = self._emit()
        info = {
            "goal_activated": goal_activated,
            "collision": collision,
            "success": st.all_reached,
            "activation_count": st.active_goal,
        }
        return StepResult(obs_noisy, obs_clean, reward, breakdown, self.done, info)

    # -- observation ------------------------------------------------------------

    def _emit(self) -> tuple[Observation, Observation]:
        cfg = self.config
        st = self.state
        _scan(self.grid.occupied, cfg.resolution, st.pose.x, st.pose.y, st.pose.yaw + self._offsets,
              float(cfg.max_range), self._scan_buf)
        clean_laser = (self._scan_buf / cfg.max_range).astype(np.float32)
        noise = cfg.noise
        dp = self._rng.uniform(-noise.pose_bound, noise.pose_bound, size=3)
        if not noise.yaw_noise:
            dp[2] = 0.0
        dl = self._rng.uniform(-noise.laser_bound, noise.laser_bound, size=cfg.n_rays)
        sx, sy, syaw = st.episode_shift
        noisy_pose = Pose(st.pose.x + sx + dp[0], st.pose.y + sy + dp[1], st.pose.yaw + syaw + dp[2])
        noisy_laser = np.clip(clean_laser + dl.astype(np.float32), 0.0, 1.0).astype(np.float32)
        clean = self._observation(st.pose, clean_laser)
        noisy = self._observation(noisy_pose, noisy_laser)
        return noisy, clean

    def _observation(self, pose: Pose, laser: np.ndarray) -> Observation:
        cfg = self.config
        st = self.state
        goal = None if st.all_reached else st.goals[st.active_goal]
        ego = crop_egocentric(self.grid, pose, cfg.window_extent, st.goals, st.active_goal,
                              cfg.robot_radius, cfg.goal_sigma)
        return Observation(laser=laser, ego_map=ego, goal_vec=goal_vector(pose, goal), pose_estimate=pose)

    def observe(self, clean: bool) -> Observation:
        """Fresh observation of the current state (draws new per-step noise)."""
        noisy, clean_obs = self._emit()
        return clean_obs if clean else noisy


class VecEnv:
    """Independent environments with per-slot seed streams and auto-reset."""

    def __init__(self, config: EnvConfig, n_envs: int):
        if n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        self.config = config
        grid = rasterize(config.scene, config.resolution)
        seeds = np.random.SeedSequence(config.seed).spawn(n_envs)
        self.envs = []
        for child in seeds:
            env = NavEnv(config, grid)
            env._rng = np.random.default_rng(child)
            self.envs.append(env)
        self.n_envs = n_envs

    def reset_all(self) -> list[tuple[Observation, Observation]]:
        return [env.reset() for env in self.envs]

    def step_all(self, actions: Sequence[Sequence[float]]) -> list[StepResult]:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim != 2 or actions.shape[0] != self.n_envs:
            raise ValueError(f"expected actions of shape ({self.n_envs}, 3), got {actions.shape}")
        results = []
        for env, action in zip(self.envs, actions):
            res = env.step(action)
            if res.done:
                info = dict(res.info)
                info["terminal_obs"] = (res.obs_noisy, res.obs_clean)
                info["episode"] = {
                    "success": env.state.all_reached,
                    "activation_count": env.state.active_goal,
                    "steps": env.state.step_count,
                    "collision_steps": env.state.collision_steps,
                    "last_activation_step": env.state.last_activation_step,
                }
                obs_noisy, obs_clean = env.reset()
                res = StepResult(obs_noisy, obs_clean, res.reward, res.reward_breakdown, True, info)
            results.append(res)
        return results


def make_vec(config: EnvConfig, n_envs: int) -> VecEnv:
    return VecEnv(config, n_envs)


TRACE_COLUMNS = (
    "step", "x", "y", "yaw", "est_x", "est_y", "est_yaw", "vx", "vy", "omega",
    "r_step", "r_col", "r_goal", "delta_d", "reward", "collision", "goal_activated", "done",
)


def write_trace(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def trace_row(step: int, true_pose: Pose, est_pose: Pose, action: Sequence[float], result: StepResult) -> dict:
    r_step, r_col, r_goal, delta_d = result.reward_breakdown
    return {
        "step": step, "x": true_pose.x, "y": true_pose.y, "yaw": true_pose.yaw,
        "est_x": est_pose.x, "est_y": est_pose.y, "est_yaw": est_pose.yaw,
        "vx": action[0], "vy": action[1], "omega": action[2],
        "r_step": r_step, "r_col": r_col, "r_goal": r_goal, "delta_d": delta_d, "reward": result.reward,
        "collision": int(result.info["collision"]), "goal_activated": int(result.info["goal_activated"]),
        "done": int(result.done),
    }
