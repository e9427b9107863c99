"""Desk-scale surrogates of three multi-agent wireless control tasks.

* ``cbf`` - MISO downlink coordinated beamforming: each transmitter picks a
  2-antenna beamformer (4 reals, re/im interleaved) under a power budget.
* ``rb``  - MF-TDMA resource-block scheduling: each agent requests an integer
  number of RBs from the pool it shares with its neighbours.
* ``ns``  - network slicing: each slice requests bandwidth (Hz) from a shared
  capacity to serve a fluctuating demand.

Exogenous randomness (next channel, next arrivals, next demand) is drawn one step
ahead and kept in the state, so ``step`` is a pure function of (state, actions)
and permuting agents in the state permutes the outcome.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DISCRETE = "discrete-integer"
CONTINUOUS = "continuous-vector"

TASK_IDS = {"cbf": 0, "rb": 1, "ns": 2}
TASK_NAMES = {v: k for k, v in TASK_IDS.items()}


@dataclass
class TaskSpec:
    task_id: int
    name: str
    num_agents: int
    obs_dim: int
    action_dim: int
    action_kind: str
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    reward_range: tuple[float, float]
    adjacency: np.ndarray
    episode_length: int
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        self.action_low = tuple(float(v) for v in self.action_low)
        self.action_high = tuple(float(v) for v in self.action_high)
        n = self.num_agents
        if n < 1:
            raise ValueError("num_agents must be positive")
        if self.obs_dim < 1 or self.action_dim < 1:
            raise ValueError("obs_dim and action_dim must be >= 1")
        if self.action_kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action range must have one [min, max] per action dimension")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action range needs min < max in every dimension")
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency must be {n}x{n}, got {self.adjacency.shape}")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ValueError("adjacency must be symmetric")
        if self.adjacency.diagonal().any():
            raise ValueError("adjacency must have no self-loops")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")

    def neighbors(self, agent: int) -> list[int]:
        return mean_neighbors(self, agent)

    def to_text(self) -> str:
        rows = ";".join("".join("1" if v else "0" for v in row) for row in self.adjacency)
        lines = [
            f"task_id = {self.task_id}",
            f"name = {self.name}",
            f"num_agents = {self.num_agents}",
            f"obs_dim = {self.obs_dim}",
            f"action_dim = {self.action_dim}",
            f"action_kind = {self.action_kind}",
            f"action_low = {','.join(repr(v) for v in self.action_low)}",
            f"action_high = {','.join(repr(v) for v in self.action_high)}",
            f"reward_range = {self.reward_range[0]!r},{self.reward_range[1]!r}",
            f"adjacency = {rows}",
            f"episode_length = {self.episode_length}",
        ]
        lines += [f"param.{k} = {v!r}" for k, v in sorted(self.params.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaskSpec":
        kv = parse_kv(text)
        try:
            params = {k[6:]: float(v) for k, v in kv.items() if k.startswith("param.")}
            adjacency = [[c == "1" for c in row] for row in kv["adjacency"].split(";")] if kv["adjacency"] else []
            floats = lambda s: tuple(float(x) for x in s.split(","))  # noqa: E731
            return cls(
                task_id=int(kv["task_id"]),
                name=kv["name"],
                num_agents=int(kv["num_agents"]),
                obs_dim=int(kv["obs_dim"]),
                action_dim=int(kv["action_dim"]),
                action_kind=kv["action_kind"],
                action_low=floats(kv["action_low"]),
                action_high=floats(kv["action_high"]),
                reward_range=floats(kv["reward_range"]),
                adjacency=np.array(adjacency, dtype=bool).reshape(int(kv["num_agents"]), -1),
                episode_length=int(kv["episode_length"]),
                params=params,
            )
        except KeyError as e:
            raise ValueError(f"task spec is missing key {e.args[0]!r}") from None


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def ring(n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    if n > 1:
        for i in range(n):
            adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = True
    return adj


def pools(n: int, size: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    for start in range(0, n, size):
        members = range(start, min(start + size, n))
        for i in members:
            for j in members:
                adj[i, j] = i != j
    return adj


def geometric(positions: np.ndarray, radius: float) -> np.ndarray:
    d = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    adj = d <= radius
    np.fill_diagonal(adj, False)
    return adj


def cbf_positions(n: int, spacing: float) -> np.ndarray:
    return np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)


def make_task(name: str, num_agents: int = 4, episode_length: int = 200, adjacency=None, **params) -> TaskSpec:
    """Build a default TaskSpec; keyword ``params`` override task constants."""
    n = num_agents
    if name == "cbf":
        p = dict(antennas=2.0, power=1600.0, noise=1.0, snr=10.0, cross_ratio=0.1, path_exp=3.0,
                 spacing=1.0, radius=1.0, rho=0.9, beta=0.2, leak_threshold=2.0)
        p.update(params)
        amp = math.sqrt(p["power"])
        if adjacency is None:
            adjacency = geometric(cbf_positions(n, p["spacing"]), p["radius"])
        return TaskSpec(TASK_IDS["cbf"], "cbf", n, 11, 4, CONTINUOUS, (-amp,) * 4, (amp,) * 4,
                        (-2.0, 8.0), adjacency, episode_length, p)
    if name == "rb":
        p = dict(rbs_per_pool=4.0, pool_size=2.0, arrival_rate=1.0, arrival_cap=3.0, max_request=8.0)
        p.update(params)
        if adjacency is None:
            adjacency = pools(n, int(p["pool_size"]))
        return TaskSpec(TASK_IDS["rb"], "rb", n, 3, 1, DISCRETE, (0.0,), (p["max_request"],),
                        (-50.0, 0.0), adjacency, episode_length, p)
    if name == "ns":
        p = dict(capacity_per_agent=250e3, eta=1e-3, demand_mean=150.0, kappa=0.1, sigma=0.3,
                 max_demand=1000.0, ema_alpha=0.3, headroom=1.1)
        p.update(params)
        if adjacency is None:
            adjacency = ring(n)
        return TaskSpec(TASK_IDS["ns"], "ns", n, 5, 1, CONTINUOUS, (1e3,), (1e6,),
                        (0.0, 1.0), adjacency, episode_length, p)
    raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASK_IDS)}")


def mean_neighbors(spec: TaskSpec, agent: int) -> list[int]:
    if not 0 <= agent < spec.num_agents:
        raise ValueError(f"agent {agent} out of range for {spec.num_agents} agents")
    return [int(j) for j in np.flatnonzero(spec.adjacency[agent])]


@dataclass
class EnvState:
    step: int
    rng: np.random.Generator
    x: dict[str, np.ndarray]
    clipped: int = 0

    def clone(self) -> "EnvState":
        return copy.deepcopy(self)


@dataclass
class StepRecord:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    done: bool


# ---------------------------------------------------------------- CBF


def _cbf_gains(spec: TaskSpec) -> np.ndarray:
    p = spec.params
    direct = p["snr"] * p["noise"] / p["power"]
    pos = cbf_positions(spec.num_agents, p["spacing"])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    with np.errstate(divide="ignore"):
        g = direct * p["cross_ratio"] * d ** (-p["path_exp"])
    np.fill_diagonal(g, direct)
    return g


def _cn(rng: np.random.Generator, gains: np.ndarray, antennas: int) -> np.ndarray:
    """Complex Gaussian channels with per-link power ``gains``: shape [rx, tx, antennas]."""
    shape = gains.shape + (antennas,)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z * np.sqrt(gains / 2.0)[..., None]


def _beams(actions: np.ndarray) -> np.ndarray:
    a = actions.reshape(actions.shape[0], -1, 2)
    return a[..., 0] + 1j * a[..., 1]


def _cbf_reset(spec, rng):
    g = _cbf_gains(spec)
    ant = int(spec.params["antennas"])
    n = spec.num_agents
    return dict(gains=g, chan=_cn(rng, g, ant), chan_next=None, rate=np.zeros(n),
                inr=np.ones(n), beam=np.zeros((n, 2 * ant)))


def _cbf_draw_next(spec, x, rng):
    rho = spec.params["rho"]
    x["chan_next"] = rho * x["chan"] + math.sqrt(1 - rho ** 2) * _cn(rng, x["gains"], int(spec.params["antennas"]))


def _cbf_obs(spec, x):
    p = spec.params
    h = x["chan"]
    n = spec.num_agents
    direct = np.stack([h[i, i] for i in range(n)]) / np.sqrt(np.diag(x["gains"]))[:, None]
    direct_ri = np.stack([direct.real, direct.imag], axis=-1).reshape(n, -1)
    norms = np.sum(np.abs(h) ** 2, axis=-1)  # [rx, tx]
    leak = (norms.sum(0) - np.diag(norms)) * p["power"] / (h.shape[-1] * p["noise"])
    return np.concatenate([direct_ri, leak[:, None], x["rate"][:, None], x["inr"][:, None],
                           x["beam"] / math.sqrt(p["power"])], axis=1)


def _cbf_step(spec, x, actions, rng):
    p = spec.params
    w = _beams(actions)
    h = x["chan"]
    # gain[i, j] = |h_ij^H w_j|^2: power from transmitter j arriving at receiver i
    gain = np.abs(np.einsum("ijk,jk->ij", h.conj(), w)) ** 2
    signal = np.diag(gain)
    interference = gain.sum(1) - signal
    caused = gain.sum(0) - signal
    rate = np.log2(1 + signal / (interference + p["noise"]))
    reward = rate - p["beta"] * caused / p["noise"]
    x.update(rate=rate, inr=(interference + p["noise"]) / p["noise"], beam=actions.copy(), chan=x["chan_next"])
    _cbf_draw_next(spec, x, rng)
    return reward


def cbf_project(spec: TaskSpec, actions: np.ndarray) -> np.ndarray:
    """Scale each beamformer down onto the power budget."""
    power = np.sum(actions ** 2, axis=1, keepdims=True)
    scale = np.minimum(1.0, np.sqrt(spec.params["power"] / np.maximum(power, 1e-300)))
    return actions * scale


# ---------------------------------------------------------------- RB


def pool_members(spec: TaskSpec) -> list[list[int]]:
    """Connected components of the adjacency: agents sharing an RB pool."""
    n = spec.num_agents
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(spec.adjacency[i]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        comps.append(sorted(comp))
    return comps


def rb_grants(requests: np.ndarray, members: list[int], capacity: int) -> np.ndarray:
    """Integer grants for one pool; oversubscription is scaled down proportionally.

    Floors of the proportional shares are granted first; leftover RBs go to the
    largest remainders, ties broken by ascending agent id.
    """
    req = requests[members]
    total = int(req.sum())
    if total <= capacity:
        return req.copy()
    exact = req * capacity / total
    grants = np.floor(exact).astype(np.int64)
    leftover = capacity - int(grants.sum())
    order = sorted(range(len(members)), key=lambda k: (-(exact[k] - grants[k]), members[k]))
    for k in order[:leftover]:
        grants[k] += 1
    return grants


def _rb_draw_next(spec, x, rng):
    p = spec.params
    x["arrivals"] = np.minimum(rng.poisson(p["arrival_rate"], spec.num_agents), int(p["arrival_cap"]))


def _rb_reset(spec, rng):
    n = spec.num_agents
    return dict(queue=np.zeros(n, dtype=np.int64), arrivals=None, grant=np.zeros(n, dtype=np.int64))


def _rb_obs(spec, x):
    # queue carried over, packets generated for the coming slot, last grant
    return np.stack([x["queue"], x["arrivals"], x["grant"]], axis=1).astype(np.float64)


def _rb_step(spec, x, actions, rng):
    req = np.rint(actions[:, 0]).astype(np.int64)
    grants = np.zeros(spec.num_agents, dtype=np.int64)
    cap = int(spec.params["rbs_per_pool"])
    for members in pool_members(spec):
        grants[members] = rb_grants(req, members, cap)
    backlog = x["queue"] + x["arrivals"]
    served = np.minimum(backlog, grants)
    queue = backlog - served
    x.update(queue=queue, grant=grants)
    _rb_draw_next(spec, x, rng)
    return -queue.astype(np.float64)


# ---------------------------------------------------------------- NS


def _ns_capacity(spec):
    return spec.params["capacity_per_agent"] * spec.num_agents


def _ns_evolve(spec, demand, rng):
    p = spec.params
    mu = math.log(p["demand_mean"])
    logd = np.log(np.maximum(demand, 1e-6))
    logd = logd + p["kappa"] * (mu - logd) + p["sigma"] * rng.standard_normal(demand.shape)
    return np.clip(np.exp(logd), 0.0, p["max_demand"])


def _ns_reset(spec, rng):
    n = spec.num_agents
    d = np.full(n, spec.params["demand_mean"])
    return dict(demand=d, demand_prev=d.copy(), demand_next=None, ema=d.copy(),
                alloc=np.zeros(n), sla=np.zeros(n))


def _ns_draw_next(spec, x, rng):
    x["demand_next"] = _ns_evolve(spec, x["demand"], rng)


def _ns_obs(spec, x):
    return np.stack([x["demand"], x["demand_prev"], x["ema"], x["alloc"] / 1e3, x["sla"]], axis=1)


def ns_effective(spec: TaskSpec, bandwidth: np.ndarray) -> np.ndarray:
    """Scale requests down proportionally when they exceed the shared capacity."""
    cap = _ns_capacity(spec)
    total = bandwidth.sum()
    return bandwidth * (cap / total) if total > cap else bandwidth


def _ns_step(spec, x, actions, rng):
    p = spec.params
    b = actions[:, 0]
    served = np.minimum(x["demand"], p["eta"] * ns_effective(spec, b))
    reward = served / np.maximum(x["demand"], 1e-9)
    a = p["ema_alpha"]
    x["demand_prev"] = x["demand"]
    x["demand"] = x["demand_next"]
    x["ema"] = a * x["demand"] + (1 - a) * x["ema"]
    x["alloc"] = b.copy()
    x["sla"] = reward
    _ns_draw_next(spec, x, rng)
    return reward


_DYNAMICS = {
    "cbf": (_cbf_reset, _cbf_draw_next, _cbf_obs, _cbf_step),
    "rb": (_rb_reset, _rb_draw_next, _rb_obs, _rb_step),
    "ns": (_ns_reset, _ns_draw_next, _ns_obs, _ns_step),
}


def reset(spec: TaskSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(np.uint64(seed))
    init, draw, _, _ = _DYNAMICS[spec.name]
    x = init(spec, rng)
    draw(spec, x, rng)
    state = EnvState(step=0, rng=rng, x=x)
    return state, observe(spec, state)


def observe(spec: TaskSpec, state: EnvState) -> np.ndarray:
    return _DYNAMICS[spec.name][2](spec, state.x)


def clip_actions(spec: TaskSpec, actions, state: EnvState | None = None) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64).reshape(spec.num_agents, spec.action_dim)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action rejected")
    lo, hi = np.array(spec.action_low), np.array(spec.action_high)
    outside = (a < lo) | (a > hi)
    if outside.any():
        if state is not None:
            state.clipped += int(outside.sum())
        a = np.clip(a, lo, hi)
    if spec.action_kind == DISCRETE:
        a = np.rint(a)
    if spec.name == "cbf":
        a = cbf_project(spec, a)
    return a


def step(spec: TaskSpec, state: EnvState, actions) -> tuple[EnvState, StepRecord]:
    """Advance one step. The input state is not modified."""
    state = state.clone()
    a = clip_actions(spec, actions, state)
    rewards = _DYNAMICS[spec.name][3](spec, state.x, a, state.rng)
    state.step += 1
    obs = observe(spec, state)
    return state, StepRecord(obs=obs, actions=a, rewards=rewards, done=state.step >= spec.episode_length)


# ---------------------------------------------------------------- policies


def expert_action(spec: TaskSpec, state: EnvState | None, obs: np.ndarray) -> np.ndarray:
    """Scripted heuristic actions computed from each agent's own observation."""
    obs = np.asarray(obs, dtype=np.float64)
    p = spec.params
    if spec.name == "rb":
        sharing = np.array([spec.adjacency[i].sum() + 1 for i in range(spec.num_agents)])
        quota = np.ceil(p["rbs_per_pool"] / sharing)
        return np.minimum(obs[:, 0] + obs[:, 1], quota)[:, None]
    if spec.name == "ns":
        b = p["headroom"] * obs[:, 2] / p["eta"]
        return np.clip(b, spec.action_low[0], spec.action_high[0])[:, None]
    if spec.name == "cbf":
        # maximum-ratio transmission on the (normalised) own channel
        h = obs[:, 0:4:2] + 1j * obs[:, 1:4:2]
        direction = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        leak = obs[:, 4]
        power = p["power"] * np.minimum(1.0, p["leak_threshold"] / np.maximum(leak, 1e-12))
        w = direction * np.sqrt(power)[:, None]
        return np.stack([w.real, w.imag], axis=-1).reshape(spec.num_agents, -1)
    raise ValueError(f"no expert for task {spec.name!r}")


def random_action(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.array(spec.action_low), np.array(spec.action_high)
    if spec.action_kind == DISCRETE:
        return rng.integers(lo.astype(int), hi.astype(int) + 1, size=(spec.num_agents, spec.action_dim)).astype(float)
    return rng.uniform(lo, hi, size=(spec.num_agents, spec.action_dim))


def rollout(spec: TaskSpec, policy: str, seed: int, rng: np.random.Generator | None = None):
    """Run one episode with the expert or random policy.

    Returns (obs [T+1, N, obs_dim], actions [T, N, action_dim], rewards [T, N]).
    """
    if policy not in ("expert", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    rng = rng if rng is not None else np.random.default_rng(np.uint64(seed) ^ np.uint64(0x9E3779B9))
    state, obs = reset(spec, seed)
    all_obs, all_act, all_rew = [obs], [], []
    done = False
    while not done:
        a = expert_action(spec, state, obs) if policy == "expert" else random_action(spec, rng)
        state, rec = step(spec, state, a)
        obs, done = rec.obs, rec.done
        all_obs.append(obs)
        all_act.append(rec.actions)
        all_rew.append(rec.rewards)
    return np.array(all_obs), np.array(all_act), np.array(all_rew)
