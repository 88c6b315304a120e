"""Encoders, actor-critic heads, the student's transform module and map augmentations."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from navdistill import tensornet as tn
from navdistill.navenv import Observation
from navdistill.tensornet import MLP, Conv2d, Linear, Module, Tensor


@dataclass(frozen=True)
class NetConfig:
    map_channels: int = 3
    map_size: int = 64
    conv_filters: tuple[int, ...] = (16, 32, 32)
    conv_kernels: tuple[int, ...] = (5, 3, 3)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    map_feature: int = 128
    n_rays: int = 60
    laser_hidden: int = 64
    laser_feature: int = 64
    goal_dim: int = 2
    pose_dim: int = 4
    head_hidden: int = 256
    transform_hidden: int = 256
    action_dim: int = 3
    action_scale: tuple[float, float, float] = (2.0, 2.0, math.pi / 4)
    init_log_std: float = -0.5

    def replace(self, **changes) -> "NetConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


# -- observation batches ---------------------------------------------------------


@dataclass
class ObsBatch:
    ego_map: np.ndarray
    laser: np.ndarray
    goal_vec: np.ndarray
    pose: np.ndarray

    def __len__(self) -> int:
        return len(self.laser)

    def take(self, idx) -> "ObsBatch":
        return ObsBatch(self.ego_map[idx], self.laser[idx], self.goal_vec[idx], self.pose[idx])


# Which observation each input slot reads from.
INPUT_MODES = {
    "teacher": ("clean", "noisy", "clean"),
    "teacher_clean_laser": ("clean", "clean", "clean"),
    "clean": ("clean", "clean", "clean"),
    "noisy": ("noisy", "noisy", "noisy"),
}


def build_inputs(pairs: Sequence[tuple[Observation, Observation]], mode: str) -> ObsBatch:
    """Stack ``(noisy, clean)`` observation pairs, picking map/laser/goal per ``mode``."""
    map_src, laser_src, goal_src = INPUT_MODES[mode]
    pick = {"noisy": 0, "clean": 1}
    maps = np.stack([p[pick[map_src]].ego_map for p in pairs])
    laser = np.stack([p[pick[laser_src]].laser for p in pairs])
    goal = np.stack([p[pick[goal_src]].goal_vec for p in pairs])
    pose = np.stack([_pose_features(p[pick[map_src]]) for p in pairs])
    return ObsBatch(maps, laser, goal, pose)


def _pose_features(obs: Observation) -> np.ndarray:
    p = obs.pose_estimate
    return np.array([p.x / 4.0, p.y / 4.0, math.cos(p.yaw), math.sin(p.yaw)], dtype=np.float32)


# -- networks ----------------------------------------------------------------------


class MapEncoder(Module):
    """Three strided conv layers with relu, then a linear projection."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.convs = []
        channels, size = cfg.map_channels, cfg.map_size
        for f, k, s in zip(cfg.conv_filters, cfg.conv_kernels, cfg.conv_strides):
            conv = Conv2d(channels, f, k, s, k // 2, rng, dtype)
            self.convs.append(conv)
            channels, size = f, conv.output_size(size)
        self.proj = Linear(channels * size * size, cfg.map_feature, rng, dtype)
        self.input_shape = (cfg.map_channels, cfg.map_size, cfg.map_size)

    def __call__(self, ego_map: Tensor | np.ndarray) -> Tensor:
        x = tn.as_tensor(ego_map, like=self.proj.weight)
        if tuple(x.shape[1:]) != self.input_shape:
            raise tn.ShapeError(f"map encoder expects (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for conv in self.convs:
            x = tn.relu(conv(x))
        return self.proj(tn.flatten(x))


class LaserEncoder(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.mlp = MLP([cfg.n_rays, cfg.laser_hidden, cfg.laser_feature], rng, dtype)
        self.n_rays = cfg.n_rays

    def __call__(self, laser) -> Tensor:
        x = tn.as_tensor(laser, like=self.mlp.layers[0].weight)
        if x.ndim != 2 or x.shape[1] != self.n_rays:
            raise tn.ShapeError(f"laser encoder expects (N, {self.n_rays}), got {x.shape}")
        return self.mlp(x)


class ActorCritic(Module):
    """Gaussian actor over pre-squash actions with a state-independent log-std, plus an optional critic."""

    def __init__(self, in_features: int, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32,
                 critic: bool = True):
        self.actor = MLP([in_features, cfg.head_hidden, cfg.action_dim], rng, dtype, out_gain=0.01)
        self.log_std = Tensor(np.full(cfg.action_dim, cfg.init_log_std, dtype=dtype), requires_grad=True)
        self.critic = MLP([in_features, cfg.head_hidden, 1], rng, dtype, out_gain=0.1) if critic else None

    def __call__(self, state: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
        mu = self.actor(state)
        value = self.critic(state).reshape(-1) if self.critic is not None else None
        return mu, self.log_std, value


class TransformModule(Module):
    """Two linear layers (relu between) mapping fused student features to the teacher's map feature."""

    def __init__(self, in_features: int, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.mlp = MLP([in_features, cfg.transform_hidden, cfg.map_feature], rng, dtype)
        self.in_features = in_features

    def __call__(self, z_hat: Tensor, q_hat: Tensor | None = None) -> Tensor:
        x = z_hat if q_hat is None else tn.concat([z_hat, q_hat], axis=1)
        if x.shape[1] != self.in_features:
            raise tn.ShapeError(f"transform expects {self.in_features} input features, got {x.shape[1]}")
        return self.mlp(x)

    def init_identity_on_z(self, map_feature: int) -> None:
        """Make the module pass its first ``map_feature`` inputs through unchanged (relu(z) - relu(-z) = z)."""
        first, second = self.mlp.layers
        if first.weight.shape[1] < 2 * map_feature:
            raise ValueError("transform hidden width must be >= 2 * map_feature for identity init")
        eye = np.eye(map_feature, dtype=first.weight.dtype)
        w1 = np.zeros_like(first.weight.data)
        w1[:map_feature, :map_feature] = eye
        w1[:map_feature, map_feature:2 * map_feature] = -eye
        w2 = np.zeros_like(second.weight.data)
        w2[:map_feature, :] = eye
        w2[map_feature:2 * map_feature, :] = -eye
        first.weight.data, second.weight.data = w1, w2
        first.bias.data = np.zeros_like(first.bias.data)
        second.bias.data = np.zeros_like(second.bias.data)


class PolicyNet(Module):
    """Common interface: ``forward(batch) -> (mu, log_std, value, aux)``."""

    kind = "base"

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg

    @property
    def action_scale(self) -> np.ndarray:
        return np.asarray(self.cfg.action_scale)

    def spec(self) -> str:
        return f"{self.kind}|{super().spec()}"


class TeacherNet(PolicyNet):
    """Map encoder + laser encoder + actor-critic; also used for the Map+Laser baseline."""

    kind = "teacher"

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(cfg)
        self.map_encoder = MapEncoder(cfg, rng, dtype)
        self.laser_encoder = LaserEncoder(cfg, rng, dtype)
        self.heads = ActorCritic(cfg.map_feature + cfg.laser_feature + cfg.goal_dim, cfg, rng, dtype)

    def encode(self, batch: ObsBatch) -> tuple[Tensor, Tensor]:
        return self.map_encoder(batch.ego_map), self.laser_encoder(batch.laser)

    def head(self, z: Tensor, q: Tensor, goal_vec) -> tuple[Tensor, Tensor, Tensor]:
        return self.heads(tn.concat([z, q, tn.as_tensor(goal_vec, like=z)], axis=1))

    def forward(self, batch: ObsBatch):
        z, q = self.encode(batch)
        mu, log_std, value = self.head(z, q, batch.goal_vec)
        return mu, log_std, value, {"z": z, "q": q}


class PoseLaserNet(PolicyNet):
    """Pose-estimate features + laser features; no map."""

    kind = "pose_laser"

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(cfg)
        self.pose_encoder = MLP([cfg.pose_dim, cfg.laser_hidden, cfg.map_feature], rng, dtype)
        self.laser_encoder = LaserEncoder(cfg, rng, dtype)
        self.heads = ActorCritic(cfg.map_feature + cfg.laser_feature + cfg.goal_dim, cfg, rng, dtype)

    def forward(self, batch: ObsBatch):
        p = self.pose_encoder(tn.as_tensor(batch.pose, like=self.heads.log_std))
        q = self.laser_encoder(batch.laser)
        mu, log_std, value = self.heads(tn.concat([p, q, tn.as_tensor(batch.goal_vec, like=p)], axis=1))
        return mu, log_std, value, {"z": p, "q": q}


class StudentNet(PolicyNet):
    """Fresh encoders, transform module and actor head; the policy reads ``(z_tilde, q_hat, goal)``."""

    kind = "student"

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32, laser_fusion: bool = True):
        super().__init__(cfg)
        self.laser_fusion = laser_fusion
        self.map_encoder = MapEncoder(cfg, rng, dtype)
        self.laser_encoder = LaserEncoder(cfg, rng, dtype)
        t_in = cfg.map_feature + (cfg.laser_feature if laser_fusion else 0)
        self.transform = TransformModule(t_in, cfg, rng, dtype)
        self.heads = ActorCritic(cfg.map_feature + cfg.laser_feature + cfg.goal_dim, cfg, rng, dtype, critic=False)

    def spec(self) -> str:
        return f"{super().spec()}|fusion={int(self.laser_fusion)}"

    def forward(self, batch: ObsBatch):
        z_hat = self.map_encoder(batch.ego_map)
        q_hat = self.laser_encoder(batch.laser)
        z_tilde = self.transform(z_hat, q_hat if self.laser_fusion else None)
        mu, log_std, _ = self.heads(tn.concat([z_tilde, q_hat, tn.as_tensor(batch.goal_vec, like=z_tilde)], axis=1))
        return mu, log_std, None, {"z": z_tilde, "z_hat": z_hat, "q": q_hat}

    def init_head_from_teacher(self, teacher: TeacherNet) -> None:
        self.heads.actor.load_state_dict(teacher.heads.actor.state_dict())
        self.heads.log_std.data = teacher.heads.log_std.data.astype(self.heads.log_std.dtype)

    def init_from_teacher(self, teacher: TeacherNet) -> None:
        """Copy teacher encoders and actor; transform passes ``z_hat`` through."""
        self.map_encoder.load_state_dict(teacher.map_encoder.state_dict())
        self.laser_encoder.load_state_dict(teacher.laser_encoder.state_dict())
        self.init_head_from_teacher(teacher)
        self.transform.init_identity_on_z(self.cfg.map_feature)


NETWORKS = {"teacher": TeacherNet, "map_laser": TeacherNet, "pose_laser": PoseLaserNet, "student": StudentNet}


def build_network(kind: str, cfg: NetConfig, seed: int = 0, dtype=np.float32, **kwargs) -> PolicyNet:
    if kind not in NETWORKS:
        raise ValueError(f"unknown network kind {kind!r}; choose from {sorted(NETWORKS)}")
    return NETWORKS[kind](cfg, np.random.default_rng(seed), dtype, **kwargs)


def encode_map(net: PolicyNet, ego_map: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        return net.map_encoder(_batched(ego_map, 4)).data


def encode_laser(net: PolicyNet, laser: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        return net.laser_encoder(_batched(laser, 2)).data


def transform(net: StudentNet, z_hat, q_hat=None) -> Tensor:
    return net.transform(tn.as_tensor(z_hat), None if q_hat is None else tn.as_tensor(q_hat))


def _batched(x: np.ndarray, ndim: int) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == ndim - 1 else x


# -- action distribution -------------------------------------------------------------


def _log_tanh_jacobian(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2), overflow-safe
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash(u: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.tanh(u) * scale


def squashed_log_prob(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Log-density of ``a = scale * tanh(u)`` where ``u ~ N(mu, exp(log_std))``."""
    with tn.no_grad():
        base = tn.gaussian_log_prob(u, mu, np.broadcast_to(log_std, np.shape(mu))).data
    return base - (_log_tanh_jacobian(u) + np.log(scale)).sum(axis=-1)


def act(net: PolicyNet, batch: ObsBatch, mode: str = "sample", rng: np.random.Generator | None = None):
    """Returns ``(action, u, log_prob, value)``; ``u`` is the pre-squash sample."""
    with tn.no_grad():
        mu, log_std, value, _ = net.forward(batch)
    mu = mu.data.astype(np.float64)
    log_std = np.broadcast_to(log_std.data.astype(np.float64), mu.shape)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    elif mode == "mean":
        u = mu.copy()
    else:
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
    scale = net.action_scale
    action = squash(u, scale)
    logp = squashed_log_prob(u, mu, log_std, scale)
    v = value.data.astype(np.float64) if value is not None else np.zeros(len(mu))
    return action, u, logp, v


# -- augmentation ---------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    brightness: tuple[float, float] = (0.6, 1.4)
    offset: tuple[float, float] = (-0.2, 0.2)
    scale: tuple[float, float] = (0.8, 1.2)


@njit(cache=True)
def _scale_kernel(maps, idx, out):
    b, c, n, _ = maps.shape
    for k in range(b):
        for i in range(n):
            si = idx[k, i]
            if si < 0:
                continue
            for j in range(n):
                sj = idx[k, j]
                if sj < 0:
                    continue
                for ch in range(c):
                    out[k, ch, i, j] = maps[k, ch, si, sj]


def random_scale(maps: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Nearest-neighbour rescale about the window center; samples from outside read 0."""
    maps = np.ascontiguousarray(maps)
    n = maps.shape[-1]
    centers = np.arange(n) + 0.5 - n / 2
    src = centers[None, :] / np.asarray(factors, dtype=np.float64)[:, None] + n / 2 - 0.5
    idx = np.floor(src + 0.5).astype(np.int64)
    idx[(idx < 0) | (idx >= n)] = -1
    out = np.zeros_like(maps)
    _scale_kernel(maps, idx, out)
    return out


def color_jitter(maps: np.ndarray, brightness: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = maps.copy()
    out[:, 0] = np.clip(maps[:, 0] * brightness[:, None, None] + offset[:, None, None], 0.0, 1.0)
    return out


def augment(ego_maps: np.ndarray, rng: np.random.Generator, cfg: AugmentationConfig = AugmentationConfig()) -> np.ndarray:
    """Random scale on all channels, then brightness/offset jitter on the occupancy channel."""
    maps = np.asarray(ego_maps)
    single = maps.ndim == 3
    if single:
        maps = maps[None]
    b = len(maps)
    factors = rng.uniform(*cfg.scale, size=b)
    bright = rng.uniform(*cfg.brightness, size=b)
    offset = rng.uniform(*cfg.offset, size=b)
    out = color_jitter(random_scale(maps, factors), bright.astype(maps.dtype), offset.astype(maps.dtype))
    return out[0] if single else out


# -- momentum key encoder ---------------------------------------------------------------


class KeyEncoder:
    """Gradient-free copy of a map encoder, moved only by :func:`tn.ema_update`."""

    def __init__(self, query_encoder: MapEncoder, momentum: float = 0.999):
        self.encoder = query_encoder.clone()
        for p in self.encoder.parameters():
            p.requires_grad = True  # names stay discoverable; graph building is disabled in forward
        self.momentum = momentum

    def __call__(self, views: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return tn.l2_normalize(self.encoder(views), axis=1).data

    def update(self, query_encoder: MapEncoder) -> None:
        tn.ema_update(self.encoder, query_encoder, self.momentum)


def momentum_encoder_forward(key_encoder: KeyEncoder, view: np.ndarray) -> np.ndarray:
    return key_encoder(_batched(view, 4))


# -- persistence --------------------------------------------------------------------------


def save_policy(net: PolicyNet, params: tn.ParamSet, path, metadata: dict | None = None) -> None:
    meta = {"kind": net.kind, "net": net.cfg.to_dict(), "dtype": net.heads.log_std.dtype.str}
    if isinstance(net, StudentNet):
        meta["laser_fusion"] = net.laser_fusion
    meta.update(metadata or {})
    tn.save_checkpoint(params, path, metadata=meta)


def load_policy(path) -> tuple[PolicyNet, tn.ParamSet]:
    """Rebuild a network from checkpoint metadata and load its weights and optimizer state."""
    ckpt = tn.read_checkpoint(path)
    meta = ckpt.metadata
    if "kind" not in meta or "net" not in meta:
        raise tn.CheckpointError(f"{path}: checkpoint carries no network description")
    kwargs = {"laser_fusion": meta["laser_fusion"]} if meta["kind"] == "student" else {}
    net = build_network(meta["kind"], NetConfig.from_dict(meta["net"]), dtype=np.dtype(meta.get("dtype", "<f4")), **kwargs)
    live = tn.load_into(net, ckpt)
    return net, live
