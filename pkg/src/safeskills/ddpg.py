"""DDPG: replay memory, OU exploration, target networks and the episode loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import TrainConfig
from .nn import (Adam, DenseNet, TrainingError, apply_gradients, backward, forward,
                 save_checkpoint, soft_update)

log = logging.getLogger(__name__)

CURVE_HEADER = ["episode", "train_return", "eval_return", "actor_loss", "critic_loss", "epsilon"]


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool = False


class ReplayBuffer:
    """Fixed-capacity ring; the oldest transition is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.cursor = 0
        self.size = 0
        self._s = self._a = self._s2 = self._r = self._done = None

    def __len__(self) -> int:
        return self.size

    def _alloc(self, t: Transition) -> None:
        n = self.capacity
        self._s = np.zeros((n, len(t.state)))
        self._a = np.zeros((n, len(t.action)))
        self._s2 = np.zeros((n, len(t.next_state)))
        self._r = np.zeros(n)
        self._done = np.zeros(n)

    def add(self, t: Transition) -> None:
        if self._s is None:
            self._alloc(t)
        if len(t.state) != self._s.shape[1] or len(t.action) != self._a.shape[1]:
            raise ValueError("transition dimensions differ from earlier ones")
        i = self.cursor
        self._s[i], self._a[i], self._s2[i] = t.state, t.action, t.next_state
        self._r[i] = t.reward
        self._done[i] = float(t.terminal)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        idx = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self._s[i].copy(), self._a[i].copy(), self._s2[i].copy(),
                           float(self._r[i]), bool(self._done[i])) for i in idx]

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return self._s[idx], self._a[idx], self._s2[idx], self._r[idx], self._done[idx]


@dataclass(frozen=True)
class OUNoise:
    x: np.ndarray
    mu: float = 0.0
    sigma: float = 1.0
    theta: float = 0.15
    dt: float = 1.0

    @classmethod
    def zeros(cls, dim: int, **kw) -> "OUNoise":
        return cls(np.full(dim, kw.get("mu", 0.0)), **kw)


def sample_noise(noise: OUNoise, rng: np.random.Generator) -> tuple[np.ndarray, OUNoise]:
    xi = rng.standard_normal(noise.x.shape)
    x = noise.x + noise.theta * (noise.mu - noise.x) * noise.dt + noise.sigma * math.sqrt(noise.dt) * xi
    return x, replace(noise, x=x)


def select_action(actor: Callable[[np.ndarray], np.ndarray], state, noise, epsilon: float,
                  bound: float = 1.0) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    a = np.asarray(actor(state), dtype=float)
    if epsilon:
        a = a + epsilon * np.asarray(noise, dtype=float)
    return np.clip(a, -bound, bound)


def epsilon_at(episode: int, cfg: TrainConfig) -> float:
    """Linear decay that lands on the floor exactly at the decay horizon."""
    horizon = max(1, round(cfg.epsilon_decay_fraction * cfg.episodes))
    frac = min(1.0, episode / horizon)
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


class Agent:
    """Actor (output inside the unit disc) and critic Q(s, a) plus their target copies.

    Observations are multiplied by ``obs_scale`` before entering either network.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, actor_lr: float = 1e-4, critic_lr: float = 1e-4,
                 obs_scale: np.ndarray | None = None):
        hidden = list(hidden)
        acts = ["relu"] * len(hidden)
        self.actor = DenseNet.create([obs_dim, *hidden, act_dim], acts + ["radial_tanh"], rng,
                                     final_scale=3e-3)
        self.critic = DenseNet.create([obs_dim + act_dim, *hidden, 1], acts + ["identity"], rng,
                                      final_scale=3e-3)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(actor_lr)
        self.critic_opt = Adam(critic_lr)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, float)

    def act(self, obs) -> np.ndarray:
        return forward(self.actor, np.asarray(obs) * self.obs_scale)[0]

    def q(self, obs, action) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(obs) * self.obs_scale, np.atleast_2d(action)], axis=1)
        return forward(self.critic, x)[0][:, 0]


def critic_targets(agent: Agent, rewards, next_states, done, gamma: float) -> np.ndarray:
    s2 = next_states * agent.obs_scale
    a2 = forward(agent.actor_target, s2)[0]
    q2 = forward(agent.critic_target, np.concatenate([s2, a2], axis=1))[0][:, 0]
    return rewards + gamma * (1.0 - done) * q2


def train_step(agent: Agent, buffer: ReplayBuffer, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[float, float]:
    """One critic regression step, one actor ascent step, then soft target updates."""
    s, a, s2, r, done = buffer.sample(cfg.batch_size, rng)
    batch = len(r)
    y = critic_targets(agent, r, s2, done, cfg.gamma)

    xs = s * agent.obs_scale
    q, tape = forward(agent.critic, np.concatenate([xs, a], axis=1))
    err = q[:, 0] - y
    critic_loss = float(np.mean(err * err))
    grads, _ = backward(agent.critic, tape, (2.0 / batch) * err[:, None])
    if not math.isfinite(critic_loss):
        raise TrainingError("critic loss is not finite")
    apply_gradients(agent.critic, grads, agent.critic_opt)

    pi, actor_tape = forward(agent.actor, xs)
    qa, critic_tape = forward(agent.critic, np.concatenate([xs, pi], axis=1))
    actor_loss = -float(np.mean(qa))
    _, dx = backward(agent.critic, critic_tape, np.full((batch, 1), -1.0 / batch))
    grads, _ = backward(agent.actor, actor_tape, dx[:, agent.obs_dim:])
    apply_gradients(agent.actor, grads, agent.actor_opt)

    soft_update(agent.critic_target, agent.critic, cfg.tau)
    soft_update(agent.actor_target, agent.actor, cfg.tau)
    return actor_loss, critic_loss


class Env(Protocol):
    obs_dim: int
    act_dim: int
    obs_scale: np.ndarray

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, dict]: ...


class PointEnv:
    """1D move-to-origin toy task: x' = clip(x + 0.1 a), reward -|x'|."""

    obs_dim = 1
    act_dim = 1

    def __init__(self, step_size: float = 0.1):
        self.step_size = step_size
        self.obs_scale = np.ones(1)
        self.x = np.zeros(1)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.x = rng.uniform(-1.0, 1.0, size=1)
        return self.x.copy()

    def step(self, action):
        self.x = np.clip(self.x + self.step_size * np.asarray(action, float), -1.0, 1.0)
        return self.x.copy(), -float(abs(self.x[0])), {"distance": float(abs(self.x[0]))}


@dataclass
class TrainingResult:
    best_actor: DenseNet
    best_eval_return: float
    best_episode: int
    curve: list[dict] = field(default_factory=list)
    agent: Agent | None = None
    skipped_episodes: int = 0


def evaluate(actor_fn: Callable[[np.ndarray], np.ndarray], env: Env, episodes: int, steps: int,
             seed: int) -> tuple[float, list[dict]]:
    """Noise-free rollouts on fixed seeds; returns mean return and each episode's last info."""
    returns, infos = [], []
    for i in range(episodes):
        obs = env.reset(np.random.default_rng([seed, i]))
        total, info = 0.0, {}
        for _ in range(steps):
            obs, r, info = env.step(actor_fn(obs))
            total += r
        returns.append(total)
        infos.append(info)
    return float(np.mean(returns)), infos


def write_curve(curve: list[dict], path: str | Path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for row in curve:
            w.writerow([row["episode"]] + [
                "" if row[k] is None else repr(float(row[k])) for k in CURVE_HEADER[1:]])


def run_training(env: Env, cfg: TrainConfig, name: str = "skill",
                 out_dir: str | Path | None = None, eval_steps: int | None = None,
                 on_episode: Callable[[int, np.ndarray], None] | None = None) -> TrainingResult:
    """Train one skill; return the actor with the highest evaluation return."""
    rng = np.random.default_rng([cfg.seed, 1])
    agent = Agent(env.obs_dim, env.act_dim, cfg.hidden, np.random.default_rng([cfg.seed, 0]),
                  cfg.actor_lr, cfg.critic_lr, env.obs_scale)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    eval_steps = eval_steps or cfg.steps_per_episode
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best = TrainingResult(agent.actor.copy(), -math.inf, -1, agent=agent)
    curve: list[dict] = []

    for ep in range(cfg.episodes):
        eps = epsilon_at(ep, cfg)
        noise = OUNoise.zeros(env.act_dim, mu=cfg.ou_mu, sigma=cfg.ou_sigma,
                              theta=cfg.ou_theta, dt=cfg.ou_dt)
        try:
            obs = env.reset(rng)
        except Exception as exc:
            raise RuntimeError(f"episode {ep}: environment reset failed: {exc}") from exc
        if on_episode is not None:
            on_episode(ep, obs)
        ret, a_losses, c_losses = 0.0, [], []
        for _ in range(cfg.steps_per_episode):
            nv, noise = sample_noise(noise, rng)
            action = select_action(agent.act, obs, nv, eps)
            try:
                nxt, r, _ = env.step(action)
            except Exception as exc:
                raise RuntimeError(f"episode {ep}: environment step failed: {exc}") from exc
            # Fixed-length episodes are truncated, not terminated.
            buffer.add(Transition(obs, action, nxt, r, False))
            obs = nxt
            ret += r
            if len(buffer) >= cfg.batch_size:
                for _ in range(cfg.updates_per_step):
                    try:
                        al, cl = train_step(agent, buffer, cfg, rng)
                    except TrainingError:
                        if out is not None:
                            save_checkpoint(out / f"{name}_nan.ckpt", best.best_actor,
                                            meta={"episode": ep, "reason": "non-finite loss"})
                        raise
                    a_losses.append(al)
                    c_losses.append(cl)

        eval_ret = None
        if (ep + 1) % cfg.eval_every == 0 or ep == cfg.episodes - 1:
            eval_ret, _ = evaluate(agent.act, env, cfg.eval_episodes, eval_steps, cfg.seed + 10_000)
            if out is not None and cfg.save_checkpoints:
                save_checkpoint(out / f"{name}_{ep + 1}.ckpt", agent.actor, agent.actor_opt,
                                rng, meta={"episode": ep + 1, "eval_return": eval_ret})
            if eval_ret > best.best_eval_return:
                best.best_actor = agent.actor.copy()
                best.best_eval_return = eval_ret
                best.best_episode = ep + 1
        curve.append({
            "episode": ep + 1, "train_return": ret, "eval_return": eval_ret,
            "actor_loss": float(np.mean(a_losses)) if a_losses else None,
            "critic_loss": float(np.mean(c_losses)) if c_losses else None,
            "epsilon": eps,
        })
        log.info("%s ep %d return %.4f eval %s eps %.3f", name, ep + 1, ret,
                 "-" if eval_ret is None else f"{eval_ret:.4f}", eps)

    best.curve = curve
    if out is not None:
        save_checkpoint(out / f"{name}_best.ckpt", best.best_actor,
                        meta={"episode": best.best_episode,
                              "eval_return": None if best.best_episode < 0 else best.best_eval_return})
    return best
