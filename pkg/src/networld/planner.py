"""Decentralised receding-horizon execution and evaluation.

Policies act on a stack of environments ``obs[E, N, obs_dim]`` so several
seeds can be evaluated in lockstep; every agent of every environment still
samples with its own generator keyed by (seed, agent, step).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from networld import envs
from networld.dataset import episode_seed
from networld.envs import TaskSpec
from networld.guidance import guidance_grad
from networld.trainer import NetWorld
from networld.worldmodel import draw_noise, p_sample_step

log = logging.getLogger(__name__)


@dataclass
class PlannerConfig:
    guidance_scale: float = 1.0
    replan_interval: int = 1
    episodes: int = 1
    seed: int = 0
    horizon: int | None = None  # defaults to the model's horizon

    def __post_init__(self):
        if self.replan_interval < 1:
            raise ValueError("replan_interval must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


class Policy(Protocol):
    def act(self, obs: np.ndarray, step: int, seeds: Sequence[int]) -> np.ndarray: ...


def agent_generator(seed: int, agent: int, step: int) -> torch.Generator:
    key = int(np.random.SeedSequence([seed, agent, step]).generate_state(1, np.uint64)[0] >> np.uint64(1))
    return torch.Generator().manual_seed(key)


class RandomPolicy:
    def __init__(self, spec: TaskSpec):
        self.spec = spec

    def act(self, obs, step, seeds):
        return np.stack([envs.random_action(self.spec, np.random.default_rng([s, step, 7])) for s in seeds])


class ExpertPolicy:
    def __init__(self, spec: TaskSpec):
        self.spec = spec

    def act(self, obs, step, seeds):
        return np.stack([envs.expert_action(self.spec, None, o) for o in obs])


class Planner:
    """Guided latent sampling + inverse dynamics, one decision per agent."""

    def __init__(self, models: NetWorld, spec: TaskSpec, cfg: PlannerConfig | None = None):
        if spec.task_id not in models.specs:
            raise ValueError(f"model has no encoder for task {spec.name} (id {spec.task_id})")
        self.models = models.eval()
        self.spec = spec
        self.cfg = cfg or PlannerConfig()
        self.horizon = self.cfg.horizon or models.cfg.horizon
        if self.horizon < 2:
            raise ValueError("planning horizon must be at least 2")
        self.fallbacks = 0
        self.last_segments: torch.Tensor | None = None
        self.last_condition: torch.Tensor | None = None
        self._plan: torch.Tensor | None = None
        self._plan_age = 0

    def guidance(self, x: torch.Tensor, t: int) -> torch.Tensor:
        return guidance_grad(self.models.classifier, x, t, self.spec.task_id)

    @torch.no_grad()
    def sample(self, cond: torch.Tensor, rngs: list[torch.Generator]) -> torch.Tensor:
        """Guided segments for condition rows ``[B, C]``; row 0 clamped every step."""
        m = self.models
        tid = self.spec.task_id
        s = self.cfg.guidance_scale
        x = draw_noise((cond.shape[0], self.horizon, cond.shape[1]), rngs, cond.dtype)
        for t in range(m.schedule.steps, 0, -1):
            x[:, 0] = cond
            grad = self.guidance(x, t) if s else None
            x = p_sample_step(m.noise_model, m.schedule, x, t, tid, grad, s, rngs)
        x[:, 0] = cond
        return x

    @torch.no_grad()
    def act(self, obs: np.ndarray, step: int, seeds: Sequence[int]) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32)
        e, n, _ = obs.shape
        m, tid = self.models, self.spec.task_id
        d = m.cfg.latent_dim
        cond, z = m.condition(tid, torch.as_tensor(obs), self.spec.adjacency)
        cond, z = cond.reshape(e * n, -1), z.reshape(e * n, d)
        k = self.cfg.replan_interval
        if self._plan is None or self._plan_age >= min(k, self.horizon - 1):
            rngs = [agent_generator(int(s), a, step) for s in seeds for a in range(n)]
            self._plan = self.sample(cond, rngs)
            self._plan_age = 0
            self.last_segments, self.last_condition = self._plan, cond
        j = self._plan_age
        z_from = z if j == 0 else self._plan[:, j, :d]
        z_next = self._plan[:, j + 1, :d]
        self._plan_age += 1
        ok = torch.isfinite(z_next).all(-1) & torch.isfinite(z_from).all(-1)
        z_next = torch.where(ok[:, None], z_next, torch.zeros_like(z_next))
        z_from = torch.where(ok[:, None], z_from, torch.zeros_like(z_from))
        idm = m.idm(tid)
        actions = idm.decode(idm(z_from, z_next)).reshape(e, n, -1)
        if not bool(ok.all()):
            bad = (~ok).reshape(e, n).numpy()
            expert = np.stack([envs.expert_action(self.spec, None, o) for o in obs])
            actions[bad] = expert[bad]
            self.fallbacks += int(bad.sum())
            log.warning("planner fell back to the expert for %d agent decisions", int(bad.sum()))
        return actions

    def reset(self) -> None:
        self._plan = None
        self._plan_age = 0


@dataclass
class EpisodeSummary:
    seed: int
    rewards: np.ndarray  # [L, N]
    decision_seconds: list[float] = field(default_factory=list)
    fallbacks: int = 0

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["step", "agent", "reward"])
            for t, row in enumerate(self.rewards):
                for a, r in enumerate(row):
                    wr.writerow([t, a, repr(float(r))])


def run_episodes(policy: Policy, spec: TaskSpec, seeds: Sequence[int]) -> list[EpisodeSummary]:
    """Run one episode per seed, all environments stepping in lockstep."""
    if hasattr(policy, "reset"):
        policy.reset()
    states, obs = zip(*(envs.reset(spec, s) for s in seeds))
    states, obs = list(states), np.stack(obs)
    rewards, timings = [], []
    before = getattr(policy, "fallbacks", 0)
    for t in range(spec.episode_length):
        start = time.perf_counter()
        try:
            actions = policy.act(obs, t, seeds)
        except Exception as e:
            raise RuntimeError(f"policy failed at step {t}: {e}") from e
        timings.append((time.perf_counter() - start) / (len(seeds) * spec.num_agents))
        step_rewards, new_obs = [], []
        for k, state in enumerate(states):
            try:
                states[k], rec = envs.step(spec, state, actions[k])
            except Exception as e:
                raise RuntimeError(f"environment failed at step {t} (seed {seeds[k]}): {e}") from e
            step_rewards.append(rec.rewards)
            new_obs.append(rec.obs)
        rewards.append(step_rewards)
        obs = np.stack(new_obs)
    rewards = np.array(rewards)  # [L, E, N]
    fallbacks = getattr(policy, "fallbacks", 0) - before
    return [EpisodeSummary(int(s), rewards[:, k], timings, fallbacks) for k, s in enumerate(seeds)]


def run_episode(policy: Policy, spec: TaskSpec, seed: int) -> EpisodeSummary:
    return run_episodes(policy, spec, [seed])[0]


@dataclass
class Evaluation:
    per_seed: list[float]
    mean: float
    std: float
    fallbacks: int = 0
    summaries: list[EpisodeSummary] = field(default_factory=list, compare=False, repr=False)


def evaluate(policy: Policy, spec: TaskSpec, episodes: int = 1, seeds: Sequence[int] = (0, 1, 2)) -> Evaluation:
    """Average reward per seed (over ``episodes`` episodes), then mean and sample std across seeds."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env_seeds = [episode_seed(s, 1000 + k) for s in seeds for k in range(episodes)]
    summaries = run_episodes(policy, spec, env_seeds)
    per_seed = [float(np.mean([summaries[i * episodes + k].mean_reward for k in range(episodes)]))
                for i in range(len(seeds))]
    std = float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0
    return Evaluation(per_seed, float(np.mean(per_seed)), std, sum(s.fallbacks for s in summaries[:1]), summaries)


def plan_step(models: NetWorld, spec: TaskSpec, obs: np.ndarray, seed: int, step: int,
              cfg: PlannerConfig | None = None) -> np.ndarray:
    """Actions ``[N, action_dim]`` for one environment's observations ``[N, obs_dim]``."""
    planner = Planner(models, spec, cfg)
    return planner.act(np.asarray(obs)[None], step, [seed])[0]
