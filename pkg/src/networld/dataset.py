"""Offline trajectory store: generation, persistence and segment sampling.

On disk a store is a directory::

    manifest.txt   plain-text header, one line per episode
    obs.bin        float32 LE, episodes concatenated, each [T, N, obs_dim] row-major
    act.bin        float32 LE, each [T, N, action_dim]
    rew.bin        float32 LE, each [T, N]
    adj.bin        float32 LE 0/1, each [N, N]
    task.txt       task spec (only when every episode comes from one task)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from networld import envs
from networld.envs import TaskSpec

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "networld-dataset 1"
DEFAULT_GAMMA = 0.99


@dataclass
class Episode:
    task_id: int
    seed: int
    policy: str
    obs: np.ndarray  # [T, N, obs_dim]
    actions: np.ndarray  # [T, N, action_dim]
    rewards: np.ndarray  # [T, N]
    adjacency: np.ndarray  # [N, N] bool

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        t, n = self.rewards.shape
        if t < 1:
            raise ValueError("episode needs at least one step")
        if self.obs.shape[:2] != (t, n) or self.actions.shape[:2] != (t, n) or self.adjacency.shape != (n, n):
            raise ValueError(
                f"inconsistent episode shapes: obs {self.obs.shape}, actions {self.actions.shape}, "
                f"rewards {self.rewards.shape}, adjacency {self.adjacency.shape}")

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_agents(self) -> int:
        return self.rewards.shape[1]

    def finite(self) -> bool:
        return bool(np.isfinite(self.obs).all() and np.isfinite(self.actions).all() and np.isfinite(self.rewards).all())


@dataclass
class TrajectoryStore:
    episodes: list[Episode] = field(default_factory=list)
    spec: TaskSpec | None = None
    gamma: float = DEFAULT_GAMMA

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_steps(self) -> int:
        return sum(e.length for e in self.episodes)

    def mean_reward(self) -> float:
        return float(np.mean(np.concatenate([e.rewards.ravel() for e in self.episodes])))

    def subset(self, count: int) -> "TrajectoryStore":
        return TrajectoryStore(self.episodes[:count], self.spec, self.gamma)

    def equals(self, other: "TrajectoryStore") -> bool:
        """Field-by-field equality, bit-exact on payloads."""
        if len(self) != len(other) or self.gamma != other.gamma:
            return False
        for a, b in zip(self.episodes, other.episodes):
            if (a.task_id, a.seed, a.policy) != (b.task_id, b.seed, b.policy):
                return False
            for x, y in ((a.obs, b.obs), (a.actions, b.actions), (a.rewards, b.rewards), (a.adjacency, b.adjacency)):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        return True


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def generate_episode(spec: TaskSpec, policy: str, seed: int, index: int) -> Episode:
    """Episode ``index`` of a store generated with ``seed``; independent of the others."""
    ep_seed = episode_seed(seed, index)
    try:
        obs, act, rew = envs.rollout(spec, policy, ep_seed, np.random.default_rng(episode_seed(ep_seed, 1)))
    except Exception as e:
        raise RuntimeError(f"environment failed while generating episode {index}: {e}") from e
    # keep the observation each action was taken on; the terminal one is dropped
    return Episode(spec.task_id, ep_seed, policy, obs[:-1], act, rew, spec.adjacency)


def generate(spec: TaskSpec, policy: str, episodes: int, seed: int, map_fn=map) -> TrajectoryStore:
    """``map_fn`` may be a process pool's ``map``; results do not depend on it."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    n = range(episodes)
    eps = list(map_fn(generate_episode, [spec] * episodes, [policy] * episodes, [seed] * episodes, n))
    return TrajectoryStore(eps, spec=spec)


def discounted_return(rewards, gamma: float = DEFAULT_GAMMA) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise ValueError("discounted_return needs a non-empty 1-D reward window")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return float(np.sum(gamma ** np.arange(r.size) * r))


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise discounted return of ``[B, H]`` windows."""
    r = np.asarray(rewards, dtype=np.float64)
    return r @ (gamma ** np.arange(r.shape[-1]))


@dataclass
class Segment:
    task_id: int
    agent_id: int
    episode: int
    start: int
    obs: np.ndarray  # [H, obs_dim]
    neighbors: list[int]
    neighbor_obs: np.ndarray  # [k, H, obs_dim]
    actions: np.ndarray  # [H, action_dim]
    rewards: np.ndarray  # [H]
    return_label: float


def _eligible(store: TrajectoryStore, horizon: int) -> list[int]:
    idx = [i for i, e in enumerate(store.episodes) if e.length >= horizon]
    if not idx:
        raise ValueError(f"no episode is at least {horizon} steps long")
    return idx


def sample_segment(store: TrajectoryStore, horizon: int, rng: np.random.Generator) -> Segment:
    eligible = _eligible(store, horizon)
    k = eligible[rng.integers(len(eligible))]
    ep = store.episodes[k]
    agent = int(rng.integers(ep.num_agents))
    t0 = int(rng.integers(ep.length - horizon + 1))
    window = slice(t0, t0 + horizon)
    nbrs = [int(j) for j in np.flatnonzero(ep.adjacency[agent])]
    rewards = ep.rewards[window, agent]
    return Segment(
        task_id=ep.task_id, agent_id=agent, episode=k, start=t0,
        obs=ep.obs[window, agent], neighbors=nbrs,
        neighbor_obs=np.stack([ep.obs[window, j] for j in nbrs]) if nbrs else np.zeros((0, horizon, ep.obs.shape[-1]), np.float32),
        actions=ep.actions[window, agent], rewards=rewards,
        return_label=discounted_return(rewards, store.gamma),
    )


@dataclass
class SegmentBatch:
    task_id: int
    agent: np.ndarray  # [B]
    obs_all: np.ndarray  # [B, H, N, obs_dim]
    mask: np.ndarray  # [B, N] neighbour indicator
    actions: np.ndarray  # [B, H, action_dim]
    rewards: np.ndarray  # [B, H]
    returns: np.ndarray  # [B]

    @property
    def obs(self) -> np.ndarray:
        return self.obs_all[np.arange(len(self.agent)), :, self.agent]


def sample_batch(store: TrajectoryStore, horizon: int, size: int, rng: np.random.Generator) -> SegmentBatch:
    """``size`` segments drawn like :func:`sample_segment`, vectorised.

    Every episode in the store must share the agent count and observation size.
    """
    eligible = np.array(_eligible(store, horizon))
    eps = eligible[rng.integers(len(eligible), size=size)]
    n = store.episodes[eps[0]].num_agents
    agents = rng.integers(n, size=size)
    obs, act, rew, mask = [], [], [], []
    for k, a in zip(eps, agents):
        ep = store.episodes[k]
        t0 = int(rng.integers(ep.length - horizon + 1))
        obs.append(ep.obs[t0:t0 + horizon])
        act.append(ep.actions[t0:t0 + horizon, a])
        rew.append(ep.rewards[t0:t0 + horizon, a])
        mask.append(ep.adjacency[a])
    rewards = np.stack(rew)
    return SegmentBatch(
        task_id=store.episodes[eps[0]].task_id, agent=agents, obs_all=np.stack(obs), mask=np.stack(mask),
        actions=np.stack(act), rewards=rewards, returns=discounted_returns(rewards, store.gamma),
    )


# ---------------------------------------------------------------- persistence

_FILES = ("obs.bin", "act.bin", "rew.bin", "adj.bin")


def write(store: TrajectoryStore, path: str | Path) -> None:
    path = Path(path)
    for i, ep in enumerate(store.episodes):
        if not ep.finite():
            raise ValueError(f"episode {i} contains non-finite values; refusing to write")
    path.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_MAGIC, f"episodes = {len(store)}", f"gamma = {store.gamma!r}"]
    for ep in store.episodes:
        lines.append(
            f"episode task_id={ep.task_id} seed={ep.seed} policy={ep.policy} num_agents={ep.num_agents} "
            f"episode_length={ep.length} obs_dim={ep.obs.shape[2]} action_dim={ep.actions.shape[2]}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    payloads = [[], [], [], []]
    for ep in store.episodes:
        for buf, arr in zip(payloads, (ep.obs, ep.actions, ep.rewards, ep.adjacency.astype(np.float32))):
            buf.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name, chunks in zip(_FILES, payloads):
        (path / name).write_bytes(b"".join(chunks))
    if store.spec is not None:
        (path / "task.txt").write_text(store.spec.to_text())


def _parse_episode_line(line: str, n: int) -> dict:
    parts = line.split()
    if not parts or parts[0] != "episode":
        raise ValueError(f"manifest line {n}: expected an episode record, got {line!r}")
    try:
        fields = dict(p.split("=", 1) for p in parts[1:])
        return dict(task_id=int(fields["task_id"]), seed=int(fields["seed"]), policy=fields["policy"],
                    n=int(fields["num_agents"]), t=int(fields["episode_length"]),
                    o=int(fields["obs_dim"]), a=int(fields["action_dim"]))
    except (KeyError, ValueError) as e:
        raise ValueError(f"manifest line {n}: corrupted episode record ({e})") from None


def read(path: str | Path) -> TrajectoryStore:
    path = Path(path)
    try:
        lines = (path / "manifest.txt").read_text().splitlines()
    except FileNotFoundError:
        raise ValueError(f"{path}: no manifest.txt") from None
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: manifest header missing or wrong")
    try:
        count = int(lines[1].split("=", 1)[1])
        gamma = float(lines[2].split("=", 1)[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: corrupted manifest header") from None
    records = [_parse_episode_line(l, i + 4) for i, l in enumerate(lines[3:]) if l.strip()]
    if len(records) != count:
        raise ValueError(f"{path}: manifest announces {count} episodes but lists {len(records)}")
    arrays = []
    for name in _FILES:
        f = path / name
        if not f.exists():
            raise ValueError(f"{path}: missing payload {name}")
        raw = f.read_bytes()
        if len(raw) % 4:
            raise ValueError(f"{path}/{name}: payload truncated (size {len(raw)} not a multiple of 4)")
        arrays.append(np.frombuffer(raw, dtype="<f4"))
    offsets = [0, 0, 0, 0]
    episodes = []
    for k, r in enumerate(records):
        sizes = (r["t"] * r["n"] * r["o"], r["t"] * r["n"] * r["a"], r["t"] * r["n"], r["n"] * r["n"])
        shapes = ((r["t"], r["n"], r["o"]), (r["t"], r["n"], r["a"]), (r["t"], r["n"]), (r["n"], r["n"]))
        parts = []
        for i, (size, shape) in enumerate(zip(sizes, shapes)):
            if offsets[i] + size > arrays[i].size:
                raise ValueError(f"{path}/{_FILES[i]}: payload truncated at episode {k}")
            parts.append(arrays[i][offsets[i]:offsets[i] + size].reshape(shape).copy())
            offsets[i] += size
        episodes.append(Episode(r["task_id"], r["seed"], r["policy"], parts[0], parts[1], parts[2], parts[3] > 0.5))
    for i, name in enumerate(_FILES):
        if offsets[i] != arrays[i].size:
            raise ValueError(f"{path}/{name}: {arrays[i].size - offsets[i]} trailing values beyond the manifest")
    spec = TaskSpec.from_text((path / "task.txt").read_text()) if (path / "task.txt").exists() else None
    return TrajectoryStore(episodes, spec, gamma)
