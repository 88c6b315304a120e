"""PPO training for the teacher (and the RL baselines) with an InfoNCE auxiliary loss."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from navdistill import tensornet as tn
from navdistill.navenv import EnvConfig, VecEnv, make_vec
from navdistill.policy import (
    AugmentationConfig,
    KeyEncoder,
    NetConfig,
    ObsBatch,
    PolicyNet,
    _log_tanh_jacobian,
    act,
    augment,
    build_inputs,
    build_network,
    load_policy,
    save_policy,
)

log = logging.getLogger(__name__)

_HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.15
    nsteps: int = 256
    nepochs: int = 2
    nminibatch: int = 4
    n_envs: int = 4
    total_steps: int = 2_000_000
    lr0: float = 4e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.25
    beta: float = 0.2
    momentum: float = 0.999
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


# -- rollout storage --------------------------------------------------------------


@dataclass
class RolloutBuffer:
    """Time-major storage; every array has leading shape ``(nsteps, n_envs)``."""

    obs: ObsBatch
    u: np.ndarray
    log_prob: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episodes: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self) -> tuple[ObsBatch, dict[str, np.ndarray]]:
        n = len(self)
        o = self.obs
        obs = ObsBatch(o.ego_map.reshape(n, *o.ego_map.shape[2:]), o.laser.reshape(n, -1),
                       o.goal_vec.reshape(n, -1), o.pose.reshape(n, -1))
        arrays = {"u": self.u.reshape(n, -1), "log_prob": self.log_prob.reshape(n), "values": self.values.reshape(n),
                  "advantages": self.advantages.reshape(n), "returns": self.returns.reshape(n)}
        return obs, arrays


class RolloutCollector:
    """Keeps the current observation of every env between collection calls."""

    def __init__(self, vec_env: VecEnv, input_mode: str):
        self.vec_env = vec_env
        self.input_mode = input_mode
        self.pairs = vec_env.reset_all()
        self.ep_return = np.zeros(vec_env.n_envs)

    def collect(self, net: PolicyNet, nsteps: int, rng: np.random.Generator) -> RolloutBuffer:
        n = self.vec_env.n_envs
        steps: list[ObsBatch] = []
        us, logps, rewards, values, dones = [], [], [], [], []
        episodes: list[dict] = []
        for _ in range(nsteps):
            batch = build_inputs(self.pairs, self.input_mode)
            action, u, logp, value = act(net, batch, "sample", rng)
            logp = logp + unsquash_correction(u, net.action_scale)
            results = self.vec_env.step_all(action)
            steps.append(batch)
            us.append(u)
            logps.append(logp)
            values.append(value)
            r = np.array([res.reward for res in results])
            d = np.array([res.done for res in results])
            rewards.append(r)
            dones.append(d)
            self.ep_return += r
            for i, res in enumerate(results):
                if res.done:
                    ep = dict(res.info["episode"])
                    ep["return"] = float(self.ep_return[i])
                    episodes.append(ep)
                    self.ep_return[i] = 0.0
            self.pairs = [(res.obs_noisy, res.obs_clean) for res in results]
        _, _, _, bootstrap = act(net, build_inputs(self.pairs, self.input_mode), "mean")
        obs = ObsBatch(
            np.stack([b.ego_map for b in steps]), np.stack([b.laser for b in steps]),
            np.stack([b.goal_vec for b in steps]), np.stack([b.pose for b in steps]),
        )
        return RolloutBuffer(obs, np.stack(us), np.stack(logps), np.stack(rewards), np.stack(values),
                             np.stack(dones), bootstrap, episodes=episodes)


def unsquash_correction(u: np.ndarray, scale) -> np.ndarray:
    """Maps a squashed-action log-density back to the Gaussian density of ``u``."""
    # PPO ratios use the Gaussian density; the tanh term would cancel anyway
    return (_log_tanh_jacobian(u) + np.log(scale)).sum(axis=-1)


def collect_rollouts(vec_env: VecEnv | RolloutCollector, policy: PolicyNet, nsteps: int, rng: np.random.Generator,
                     input_mode: str = "teacher") -> RolloutBuffer:
    collector = vec_env if isinstance(vec_env, RolloutCollector) else RolloutCollector(vec_env, input_mode)
    return collector.collect(policy, nsteps, rng)


# -- advantage estimation --------------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap, gamma: float = 0.99, lam: float = 0.95):
    """GAE over time-major arrays; ``dones[t]`` marks that the episode ended after step ``t``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError(f"compute_gae: mismatched shapes {rewards.shape}, {values.shape}, {dones.shape}")
    bootstrap = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        next_value = bootstrap if t == len(rewards) - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# -- losses ------------------------------------------------------------------------------


def gaussian_entropy(log_std: tn.Tensor) -> tn.Tensor:
    return tn.tsum(log_std + _HALF_LOG_2PI_E)


def ppo_loss(net: PolicyNet, batch: ObsBatch, u: np.ndarray, old_log_prob: np.ndarray, advantages: np.ndarray,
             returns: np.ndarray, clip: float = 0.15, value_coef: float = 0.5,
             entropy_coef: float = 0.01) -> tuple[tn.Tensor, dict]:
    """Clipped surrogate + ``value_coef`` * value MSE - ``entropy_coef`` * entropy."""
    mu, log_std, value, aux = net.forward(batch)
    dtype = mu.dtype
    logp = tn.gaussian_log_prob(u.astype(dtype), mu, log_std)
    ratio = tn.exp(logp - old_log_prob.astype(dtype))
    adv = advantages.astype(dtype)
    surr = tn.minimum(ratio * adv, tn.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    policy_loss = -tn.mean(surr)
    value_loss = tn.mean((value - returns.astype(dtype)) ** 2)
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    r = ratio.data
    stats = {
        "policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data), "entropy": float(entropy.data),
        "ratio_mean": float(r.mean()), "clip_frac": float(np.mean(np.abs(r - 1.0) > clip)),
    }
    return loss, {**stats, "aux": aux}


def infonce_loss(query: tn.Tensor, keys, tau: float = 0.25) -> tn.Tensor:
    """Mean over queries of ``-log softmax_i(q_i . k / tau)[i]``; the positive sits in the denominator."""
    query = tn.as_tensor(query)
    keys = tn.as_tensor(keys, like=query)
    if query.ndim != 2 or query.shape != keys.shape:
        raise tn.ShapeError(f"infonce_loss: query {query.shape} and keys {keys.shape} must match")
    if query.shape[0] < 2:
        raise ValueError("infonce_loss needs a batch of at least 2")
    logits = tn.matmul(query, tn.transpose(keys)) * (1.0 / tau)
    positive = tn.tsum(query * keys, axis=1) * (1.0 / tau)
    return tn.mean(tn.logsumexp(logits, axis=1) - positive)


# -- update ---------------------------------------------------------------------------------


def contrastive_loss(net: PolicyNet, key_encoder: KeyEncoder, maps: np.ndarray, cfg: ContrastiveConfig,
                     rng: np.random.Generator) -> tn.Tensor:
    view_q = augment(maps, rng, cfg.augmentation)
    view_k = augment(maps, rng, cfg.augmentation)
    query = tn.l2_normalize(net.map_encoder(view_q), axis=1)
    keys = key_encoder(view_k)
    return infonce_loss(query, keys, cfg.tau)


def teacher_update(buffer: RolloutBuffer, net: PolicyNet, key_encoder: KeyEncoder | None, params: tn.ParamSet,
                   ppo: PPOConfig, contrastive: ContrastiveConfig, lr: float, rng: np.random.Generator) -> dict:
    """``nepochs`` passes over ``nminibatch`` shuffled splits with loss ``L_ppo + beta * L_infonce``."""
    if buffer.advantages is None:
        buffer.advantages, buffer.returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                                                        buffer.bootstrap, ppo.gamma, ppo.gae_lambda)
    obs, arr = buffer.flat()
    adv = normalize_advantages(arr["advantages"])
    n = len(adv)
    use_nce = contrastive.beta > 0 and key_encoder is not None
    records = []
    for _ in range(ppo.nepochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, ppo.nminibatch):
            mb = obs.take(idx)
            loss, stats = ppo_loss(net, mb, arr["u"][idx], arr["log_prob"][idx], adv[idx], arr["returns"][idx],
                                   ppo.clip, ppo.value_coef, ppo.entropy_coef)
            stats.pop("aux")
            if use_nce:
                nce = contrastive_loss(net, key_encoder, mb.ego_map, contrastive, rng)
                loss = loss + contrastive.beta * nce
                stats["infonce_loss"] = float(nce.data)
            else:
                stats["infonce_loss"] = float("nan")
            loss.backward()
            stats["grad_norm"] = tn.adam_step(params, lr, max_grad_norm=ppo.max_grad_norm)
            if key_encoder is not None:
                key_encoder.update(net.map_encoder)
            stats["loss"] = float(loss.data)
            records.append(stats)
    return {k: float(np.mean([r[k] for r in records])) for k in records[0]}


# -- training driver ---------------------------------------------------------------------------------


METRIC_COLUMNS = ("update_index", "mean_return", "ppo_loss", "value_loss", "entropy", "infonce_loss", "lr",
                  "steps", "success_rate", "mean_activation", "episodes", "wall_time")


@dataclass
class TeacherRunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    kind: str = "teacher"
    input_mode: str = "teacher"
    seed: int = 0
    run_dir: str = "runs/teacher"
    checkpoint_every: int = 50
    resume: str | None = None

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(), "net": self.net.to_dict(), "ppo": dataclasses.asdict(self.ppo),
            "contrastive": dataclasses.asdict(self.contrastive), "kind": self.kind, "input_mode": self.input_mode,
            "seed": self.seed, "run_dir": self.run_dir, "checkpoint_every": self.checkpoint_every,
            "resume": self.resume,
        }


def _append_metrics(path: Path, columns, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow(row)


def train_teacher(cfg: TeacherRunConfig) -> Path:
    """Collect/update until ``total_steps``; returns the final checkpoint path."""
    run_dir = Path(cfg.run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
    rng = np.random.default_rng(cfg.seed)
    if cfg.resume:
        net, params = load_policy(cfg.resume)
        step = int(params.metadata.get("global_step", 0))
        update_index = int(params.metadata.get("update_index", 0))
        rng = np.random.default_rng([cfg.seed, update_index])
    else:
        net = build_network(cfg.kind, cfg.net, seed=cfg.seed)
        params = net.paramset()
        step = update_index = 0
    key_encoder = None
    if cfg.contrastive.beta > 0 and hasattr(net, "map_encoder"):
        key_encoder = KeyEncoder(net.map_encoder, cfg.contrastive.momentum)
        if cfg.resume and "key_encoder" in params.metadata:
            key_path = Path(params.metadata["key_encoder"])
            key_encoder.encoder.load_state_dict({k: t.data for k, t in tn.read_checkpoint(key_path)})
    env_cfg = cfg.env.replace(seed=cfg.env.seed + 1000 * update_index)
    collector = RolloutCollector(make_vec(env_cfg, cfg.ppo.n_envs), cfg.input_mode)
    metrics_path = run_dir / "metrics.csv"
    per_update = cfg.ppo.nsteps * cfg.ppo.n_envs
    t0 = time.time()
    recent: list[dict] = []

    def save(tag: str) -> Path:
        path = run_dir / "checkpoints" / f"{tag}.ckpt"
        meta = {"global_step": step, "update_index": update_index, "input_mode": cfg.input_mode,
                "beta_t": cfg.contrastive.beta, "env_scene": cfg.env.scene.name}
        if key_encoder is not None:
            key_path = run_dir / "checkpoints" / f"{tag}.key.ckpt"
            tn.save_checkpoint(key_encoder.encoder.paramset(), key_path)
            meta["key_encoder"] = str(key_path)
        save_policy(net, params, path, meta)
        return path

    while step < cfg.ppo.total_steps:
        lr = tn.lr_schedule(step, cfg.ppo.total_steps, cfg.ppo.lr0)
        buffer = collector.collect(net, cfg.ppo.nsteps, rng)
        stats = teacher_update(buffer, net, key_encoder, params, cfg.ppo, cfg.contrastive, lr, rng)
        step += per_update
        update_index += 1
        recent = (recent + buffer.episodes)[-100:]
        row = {
            "update_index": update_index, "steps": step, "lr": lr,
            "mean_return": float(np.mean([e["return"] for e in recent])) if recent else float("nan"),
            "ppo_loss": stats["policy_loss"], "value_loss": stats["value_loss"], "entropy": stats["entropy"],
            "infonce_loss": stats["infonce_loss"],
            "success_rate": float(np.mean([e["success"] for e in recent])) if recent else float("nan"),
            "mean_activation": float(np.mean([e["activation_count"] for e in recent])) if recent else float("nan"),
            "episodes": len(buffer.episodes), "wall_time": round(time.time() - t0, 1),
        }
        _append_metrics(metrics_path, METRIC_COLUMNS, row)
        log.info("update %d step %d return %.2f success %.2f nce %.3f", update_index, step, row["mean_return"],
                 row["success_rate"], row["infonce_loss"])
        if cfg.checkpoint_every and update_index % cfg.checkpoint_every == 0:
            save(f"update_{update_index:05d}")
    return save("final")
