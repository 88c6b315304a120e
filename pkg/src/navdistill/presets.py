"""Named configurations: the full-size defaults and a reduced desk-scale variant."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from navdistill.gridworld import bundled_scene
from navdistill.navenv import EnvConfig, NoiseModel
from navdistill.policy import NetConfig
from navdistill.student import StudentConfig
from navdistill.teacher import ContrastiveConfig, PPOConfig

# The small scene is about half the size of the full one, so noise bounds shrink with it.
DESK_NOISE_SCALE = 0.6
# 150k student steps give ~1.2k Adam steps instead of ~7.8k, so the student learning rate is raised to compensate.
DESK_STUDENT_LR = 1e-3


@dataclass(frozen=True)
class Preset:
    name: str
    env: EnvConfig
    test_scene: str
    net: NetConfig
    ppo: PPOConfig
    contrastive: ContrastiveConfig
    student: StudentConfig
    noise_scale: float = 1.0
    eval_episodes: int = 100
    eval_episode_steps: int = 1500
    eval_seeds: tuple[int, ...] = tuple(range(10))
    extra: dict = field(default_factory=dict)

    def noise(self, shift: float, pose: float, laser: float) -> NoiseModel:
        """Noise bounds given at full scale, shrunk for this preset's scene."""
        return _scaled_noise(shift, pose, laser, self.noise_scale)

    def replace(self, **changes) -> "Preset":
        return dataclasses.replace(self, **changes)


def paper_preset() -> Preset:
    return Preset(
        name="paper",
        env=EnvConfig(),
        test_scene="test",
        net=NetConfig(),
        ppo=PPOConfig(),
        contrastive=ContrastiveConfig(),
        student=StudentConfig(),
    )


def desk_preset() -> Preset:
    noise = _scaled_noise(0.5, 0.1, 0.1, DESK_NOISE_SCALE)
    return Preset(
        name="desk",
        env=EnvConfig(scene=bundled_scene("small_train"), episode_steps=300, noise=noise),
        test_scene="small_test",
        net=NetConfig(conv_filters=(8, 16, 16), map_feature=32, laser_hidden=32, laser_feature=16, head_hidden=64,
                      transform_hidden=64),
        ppo=PPOConfig(total_steps=250_000),
        contrastive=ContrastiveConfig(),
        student=StudentConfig(total_steps=150_000, lr0=DESK_STUDENT_LR),
        noise_scale=DESK_NOISE_SCALE,
        eval_episodes=200,
        eval_episode_steps=300,
    )


def _scaled_noise(shift: float, pose: float, laser: float, k: float) -> NoiseModel:
    return NoiseModel(round(shift * k, 6), round(pose * k, 6), round(laser * k, 6))


PRESETS = {"paper": paper_preset, "desk": desk_preset}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
