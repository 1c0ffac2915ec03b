"""Desk-scale off-policy RL: noisy DQN and SAC, both with optional SAM, plus toy environments."""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from plastic import rng as rngs
from plastic import tensor as T
from plastic.nn import ArchSpec, Network, build_network
from plastic.optim import (NoiseSource, Optimizer, OptimizerConfig, SamConfig, base_step,
                           sam_perturbation, sam_step, scope_mask)
from plastic.plasticity import ProbeConfig, ResetPolicy, active_fraction, apply_reset, network_lambda_max
from plastic.tensor import ContractError, NumericError, Tensor

ALPHA_FLOOR = 1e-6
PRE_TANH_CLAMP = 10.0
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    s: np.ndarray
    a: Any
    r: float
    s_next: np.ndarray
    done: int

    def __post_init__(self):
        if self.done not in (0, 1):
            raise ContractError(f"done must be 0 or 1, got {self.done}")


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_shape: tuple, action_shape: tuple = (), discrete: bool = True,
                 min_fill: int = 1):
        if capacity < 1 or min_fill < 1:
            raise ContractError("capacity and min_fill must be positive")
        self.capacity, self.min_fill = capacity, min_fill
        self.obs_shape = tuple(obs_shape)
        self.s = np.zeros((capacity,) + self.obs_shape)
        self.s_next = np.zeros((capacity,) + self.obs_shape)
        self.a = np.zeros((capacity,) + tuple(action_shape), dtype=np.int64 if discrete else np.float64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.insertions = 0

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    @property
    def ready(self) -> bool:
        return len(self) >= self.min_fill

    def add(self, t: Transition) -> None:
        if np.shape(t.s) != self.obs_shape or np.shape(t.s_next) != self.obs_shape:
            raise ContractError(f"observation shape {np.shape(t.s)} != buffer shape {self.obs_shape}")
        i = self.insertions % self.capacity
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = t.s, t.a, t.r, t.s_next, t.done
        self.insertions += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if not self.ready:
            raise ContractError(f"buffer holds {len(self)} transitions, needs {self.min_fill} before sampling")
        idx = rng.integers(0, len(self), batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def contents(self) -> Batch:
        """Stored transitions, oldest first."""
        n = len(self)
        start = self.insertions % self.capacity if self.insertions > self.capacity else 0
        idx = (start + np.arange(n)) % self.capacity
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def metadata(self) -> dict:
        return {"capacity": self.capacity, "size": len(self), "insertions": self.insertions,
                "min_fill": self.min_fill}


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

class GridWorld:
    """N x N grid, goal in the bottom-right corner, random non-goal start cell.

    Actions: 0 up, 1 down, 2 left, 3 right; moves into walls leave the agent in
    place. Reaching the goal gives +1 and ends the episode. The dense variant
    also charges ``0.1 * dist / max_dist`` per step, where ``dist`` is the
    Manhattan distance of the new cell to the goal; the sparse variant pays
    nothing until the goal.
    """

    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    n_actions = 4
    discrete = True

    def __init__(self, size: int = 5, reward: str = "dense", step_limit: int | None = None, seed: int = 0):
        if size < 2:
            raise ContractError("grid size must be at least 2")
        if reward not in ("dense", "sparse"):
            raise ContractError(f"unknown reward variant {reward!r}")
        self.size, self.reward_kind = size, reward
        self.step_limit = step_limit or 4 * size * size
        self.n_states = size * size
        self.goal = self.n_states - 1
        self.max_dist = 2 * (size - 1)
        self.rng = rngs.stream(seed, "env")
        self.state, self.t = 0, 0

    @property
    def observation_shape(self) -> tuple:
        return (self.n_states,)

    def observe(self, s: int) -> np.ndarray:
        o = np.zeros(self.n_states)
        o[s] = 1.0
        return o

    def dist(self, s: int) -> int:
        r, c = divmod(s, self.size)
        return 2 * (self.size - 1) - r - c

    def transition(self, s: int, a: int) -> int:
        r, c = divmod(s, self.size)
        dr, dc = self.MOVES[a]
        r, c = min(max(r + dr, 0), self.size - 1), min(max(c + dc, 0), self.size - 1)
        return r * self.size + c

    def is_terminal(self, s: int) -> bool:
        return s == self.goal

    def reward(self, s: int, a: int, s_next: int) -> float:
        if s_next == self.goal:
            return 1.0
        return -0.1 * self.dist(s_next) / self.max_dist if self.reward_kind == "dense" else 0.0

    def reset(self, start: int | None = None) -> np.ndarray:
        self.state = int(self.rng.integers(0, self.n_states - 1)) if start is None else int(start)
        self.t = 0
        return self.observe(self.state)

    def step(self, a: int) -> tuple[np.ndarray, float, bool, bool]:
        if not 0 <= int(a) < self.n_actions:
            raise ContractError(f"invalid action {a}")
        s2 = self.transition(self.state, int(a))
        r = self.reward(self.state, int(a), s2)
        self.state, self.t = s2, self.t + 1
        done = self.is_terminal(s2)
        return self.observe(s2), r, done, (not done and self.t >= self.step_limit)


class PointMass:
    """2-D point in [-1, 1]^2 steered by velocity actions in [-1, 1]^2 toward the origin.

    Position moves by ``0.1 * action`` per step (clipped to the box); the reward
    is the negative Euclidean distance to the origin. Episodes last ``step_limit``
    steps and never terminate early.
    """

    discrete = False
    action_dim = 2
    observation_shape = (2,)

    def __init__(self, step_limit: int = 50, speed: float = 0.1, seed: int = 0):
        self.step_limit, self.speed = step_limit, speed
        self.rng = rngs.stream(seed, "env")
        self.pos = np.zeros(2)
        self.t = 0

    def reset(self, start: np.ndarray | None = None) -> np.ndarray:
        self.pos = self.rng.uniform(-1.0, 1.0, 2) if start is None else np.array(start, dtype=np.float64)
        self.t = 0
        return self.pos.copy()

    def step(self, a) -> tuple[np.ndarray, float, bool, bool]:
        a = np.clip(np.asarray(a, dtype=np.float64).reshape(2), -1.0, 1.0)
        self.pos = np.clip(self.pos + self.speed * a, -1.0, 1.0)
        self.t += 1
        return self.pos.copy(), -float(np.linalg.norm(self.pos)), False, self.t >= self.step_limit


def make_env(kind: str, seed: int, **kw):
    if kind in ("gridworld", "gridworld-discrete"):
        return GridWorld(seed=seed, **kw)
    if kind in ("point-mass", "point-mass-continuous"):
        return PointMass(seed=seed, **kw)
    raise ContractError(f"unknown environment {kind!r}")


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def hns(agent_score: float, random_score: float, human_score: float) -> float:
    """Human-normalized score (agent - random) / (human - random)."""
    if human_score == random_score:
        raise ContractError("human and random scores coincide; HNS undefined")
    return (agent_score - random_score) / (human_score - random_score)


def polyak(target: Network, online: Network, tau: float) -> None:
    """``w_target <- tau * w_target + (1 - tau) * w_online`` for every parameter."""
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"tau must lie in (0, 1], got {tau}")
    if tau == 1.0:
        return
    for n, p in target.params.items():
        p.data = tau * p.data + (1.0 - tau) * online.params[n].data


def td_target(r, s_next, done, target_q_fn: Callable[[np.ndarray], np.ndarray], gamma: float) -> np.ndarray:
    """``r + gamma * (1 - done) * max_a' Q_target(s', a')`` computed without gradient."""
    r, done = np.asarray(r, dtype=np.float64), np.asarray(done, dtype=np.float64)
    with T.no_grad():
        q = np.asarray(target_q_fn(s_next), dtype=np.float64)
    boot = q.max(axis=1) if q.ndim == 2 else q
    return r + gamma * (1.0 - done) * boot


def greedy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(q, axis=-1)


@dataclass
class AgentConfig:
    gamma: float = 0.99
    tau: float = 0.99
    replay_ratio: int = 1
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        kind="adam", lr=1e-3, betas=(0.9, 0.999), eps=1.5e-5, max_grad_norm=10.0))
    sam: SamConfig = field(default_factory=lambda: SamConfig(enabled=False))
    reset: ResetPolicy | None = None  # interval counted in optimization steps
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    backbone_layers: int = 1
    layernorm: bool = False
    activation: str = "relu"
    buffer_capacity: int = 100_000
    min_fill: int = 500
    # DQN
    noisy: bool = True
    sigma0: float = 0.5
    exploration: str = "noisy"  # noisy | epsilon
    explore_with_target: bool = True
    epsilon: float = 0.1
    # SAC
    actor_sam: SamConfig = field(default_factory=lambda: SamConfig(enabled=False))
    alpha_sam: SamConfig = field(default_factory=lambda: SamConfig(rho=0.0))
    init_temperature: float = 0.1
    target_entropy: float | None = None  # defaults to -action_dim
    actor_lr: float | None = None
    alpha_lr: float | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ContractError(f"tau must lie in (0, 1], got {self.tau}")
        if int(self.replay_ratio) != self.replay_ratio or self.replay_ratio < 1:
            raise ContractError(f"replay ratio must be a positive integer, got {self.replay_ratio}")
        if self.exploration not in ("noisy", "epsilon"):
            raise ContractError(f"unknown exploration mode {self.exploration!r}")


def _probe(net: Network, x: np.ndarray, loss_of_output, probe: ProbeConfig | None) -> dict[str, float]:
    if probe is None:
        return {}
    est = network_lambda_max(net, loss_of_output, x, probe)
    return {"lambda_max": est.value, "active_fraction": active_fraction(net, x, probe.probe_layers)}


# ---------------------------------------------------------------------------
# DQN
# ---------------------------------------------------------------------------

def q_arch(obs_dim: int, n_actions: int, cfg: AgentConfig) -> ArchSpec:
    return ArchSpec((obs_dim,), fc=list(cfg.hidden) + [n_actions], backbone_fc=cfg.backbone_layers,
                    activation=cfg.activation, layernorm=cfg.layernorm, noisy=cfg.noisy, sigma0=cfg.sigma0)


def q_values(net: Network, obs: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return net(np.atleast_2d(obs)).data


def act(net: Network, observation, mode: str = "eval", rng: np.random.Generator | None = None,
        epsilon: float = 0.0):
    """Pick an action for one observation.

    Discrete nets (``mode`` in ``eval | noisy-explore | epsilon-greedy``) return
    the argmax of Q with lowest-index tie-breaking. ``noisy-explore`` draws fresh
    layer noise from ``rng`` first; ``eval`` uses the zero draw. Continuous actors
    are handled by :meth:`SACAgent.act`.
    """
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape != tuple(net.input_shape):
        raise ContractError(f"observation shape {obs.shape} != network input {tuple(net.input_shape)}")
    if mode == "epsilon-greedy":
        if rng is None:
            raise ContractError("epsilon-greedy needs an rng")
        saved = net.get_noise()
        net.zero_noise()
        q = q_values(net, obs)[0]
        net.set_noise(saved)
        if rng.random() < epsilon:
            return int(rng.integers(0, q.shape[0]))
        return int(greedy(q))
    if mode == "noisy-explore":
        if rng is None:
            raise ContractError("noisy exploration needs an rng")
        net.sample_noise(rng)
        return int(greedy(q_values(net, obs)[0]))
    if mode == "eval":
        saved = net.get_noise()
        net.zero_noise()
        try:
            return int(greedy(q_values(net, obs)[0]))
        finally:
            net.set_noise(saved)
    raise ContractError(f"unknown action mode {mode!r}")


def dqn_loss(q_net: Network, batch: Batch, y: np.ndarray) -> Tensor:
    q = q_net(batch.s)
    picked = T.index(q, (np.arange(len(batch)), batch.a))
    return T.squared_error(picked, y)


def target_q_fn(target: Network) -> Callable[[np.ndarray], np.ndarray]:
    def fn(s_next):
        saved = target.get_noise()
        target.zero_noise()
        try:
            return target(s_next).data
        finally:
            target.set_noise(saved)
    return fn


def dqn_update(buffer: ReplayBuffer, q_net: Network, target_net: Network, optimizer: Optimizer,
               cfg: AgentConfig, rng: np.random.Generator, noise: NoiseSource | None = None,
               mask: Sequence[bool] | None = None) -> dict[str, float]:
    """One optimization step: sample, TD target, (SAM) step on squared TD error, Polyak update."""
    batch = buffer.sample(cfg.batch_size, rng)
    y = td_target(batch.r, batch.s_next, batch.done, target_q_fn(target_net), cfg.gamma)
    params = q_net.parameters()
    res = sam_step(lambda b: dqn_loss(q_net, b, y), batch, params, optimizer, cfg.sam, mask, noise)
    polyak(target_net, q_net, cfg.tau)
    return {"td_loss": res.loss, "grad_norm": res.grad_norm, "target_mean": float(np.mean(y))}


class DQNAgent:
    def __init__(self, obs_dim: int, n_actions: int, cfg: AgentConfig, seed: int):
        self.cfg = cfg
        self.n_actions = n_actions
        self.q = build_network(q_arch(obs_dim, n_actions, cfg), rngs.int_seed(seed, "init"))
        self.target = self.q.copy()
        self.opt = Optimizer(self.q.parameters(), cfg.optimizer)
        self.mask = scope_mask(self.q, cfg.sam.scope) if cfg.sam.active and cfg.sam.scope in ("backbone", "head") \
            else None
        self.update_rng = rngs.stream(seed, "updates")
        self.explore_rng = rngs.stream(seed, "explore")
        self.noise = NoiseSource([self.q], rngs.stream(seed, "noise"))
        self.reset_rng = rngs.stream(seed, "reset")
        self.updates = 0
        self.resets: list = []

    def act(self, obs, explore: bool = True) -> int:
        if not explore:
            return act(self.q, obs, "eval")
        if self.cfg.exploration == "epsilon":
            return act(self.q, obs, "epsilon-greedy", self.explore_rng, self.cfg.epsilon)
        net = self.target if self.cfg.explore_with_target else self.q
        a = act(net, obs, "noisy-explore", self.explore_rng)
        net.zero_noise()
        return a

    def update(self, buffer: ReplayBuffer) -> dict[str, float]:
        m = dqn_update(buffer, self.q, self.target, self.opt, self.cfg, self.update_rng, self.noise, self.mask)
        self.updates += 1
        if self.cfg.reset is not None:
            ev = apply_reset(self.q, self.cfg.reset, self.updates, self.reset_rng, [self.opt])
            if ev is not None:
                self.resets.append(ev)
        return m

    def greedy_actions(self, observations: np.ndarray) -> np.ndarray:
        saved = self.q.get_noise()
        self.q.zero_noise()
        try:
            return greedy(q_values(self.q, observations))
        finally:
            self.q.set_noise(saved)

    def probe(self, buffer: ReplayBuffer, probe: ProbeConfig) -> dict[str, float]:
        b = buffer.sample(min(probe.probe_batch_size, len(buffer)), rngs.stream(probe.seed, "probe", self.updates))
        y = td_target(b.r, b.s_next, b.done, target_q_fn(self.target), self.cfg.gamma)
        return _probe(self.q, b.s, lambda out: T.squared_error(T.index(out, (np.arange(len(b)), b.a)), y), probe)

    def checkpoint(self) -> dict:
        from plastic.nn import checkpoint_dict
        return {"q": checkpoint_dict(self.q), "target": checkpoint_dict(self.target),
                "optimizer": self.opt.state_dict(), "updates": self.updates}


def optimal_q(env: GridWorld, gamma: float, tol: float = 1e-12) -> np.ndarray:
    """Q* of the gridworld by value iteration."""
    V = np.zeros(env.n_states)
    while True:
        Q = np.zeros((env.n_states, env.n_actions))
        for s in range(env.n_states):
            if env.is_terminal(s):
                continue
            for a in range(env.n_actions):
                s2 = env.transition(s, a)
                Q[s, a] = env.reward(s, a, s2) + (0.0 if env.is_terminal(s2) else gamma * V[s2])
        V2 = Q.max(axis=1)
        if np.max(np.abs(V2 - V)) < tol:
            return Q
        V = V2


def policy_agreement(actions: np.ndarray, q_star: np.ndarray, env: GridWorld, tol: float = 1e-9) -> float:
    """Fraction of non-terminal states where the action is among the optimal ones."""
    states = [s for s in range(env.n_states) if not env.is_terminal(s)]
    ok = [q_star[s, actions[s]] >= q_star[s].max() - tol for s in states]
    return float(np.mean(ok))


def grid_greedy_return(agent: DQNAgent, env: GridWorld) -> float:
    """Mean undiscounted return of the greedy policy from every non-goal start cell."""
    probe = GridWorld(env.size, env.reward_kind, env.step_limit)
    total = []
    for s0 in range(env.n_states - 1):
        obs, ret, done, trunc = probe.reset(s0), 0.0, False, False
        while not (done or trunc):
            obs, r, done, trunc = probe.step(agent.act(obs, explore=False))
            ret += r
        total.append(ret)
    return float(np.mean(total))


@dataclass
class DQNRunConfig:
    env_steps: int = 20_000
    grid_size: int = 5
    reward: str = "dense"
    eval_every: int = 1000
    probe: ProbeConfig | None = None


def run_dqn(agent_cfg: AgentConfig, run_cfg: DQNRunConfig, seed: int,
            on_record: Callable[[dict], None] | None = None) -> tuple[list[dict], DQNAgent]:
    """Algorithm-1 style loop: one env step, then ``replay_ratio`` optimization steps."""
    env = GridWorld(run_cfg.grid_size, run_cfg.reward, seed=seed)
    agent = DQNAgent(env.n_states, env.n_actions, agent_cfg, seed)
    buf = ReplayBuffer(agent_cfg.buffer_capacity, env.observation_shape, min_fill=agent_cfg.min_fill)
    q_star = optimal_q(env, agent_cfg.gamma)
    all_obs = np.eye(env.n_states)
    records, recent, ep_ret = [], [], 0.0
    losses, norms = [], []
    obs = env.reset()
    for step in range(1, run_cfg.env_steps + 1):
        a = agent.act(obs)
        obs2, r, done, trunc = env.step(a)
        buf.add(Transition(obs, a, r, obs2, int(done)))
        ep_ret += r
        obs = obs2
        if done or trunc:
            recent.append(ep_ret)
            ep_ret, obs = 0.0, env.reset()
        if buf.ready:
            for _ in range(agent_cfg.replay_ratio):
                m = agent.update(buf)
                losses.append(m["td_loss"])
                norms.append(m["grad_norm"])
        if step % run_cfg.eval_every == 0 or step == run_cfg.env_steps:
            rec = {"step": step, "updates": agent.updates,
                   "episode_return": float(np.mean(recent[-10:])) if recent else math.nan,
                   "td_loss": float(np.mean(losses)) if losses else math.nan,
                   "grad_norm": float(np.mean(norms)) if norms else math.nan,
                   "eval_return": grid_greedy_return(agent, env),
                   "agreement": policy_agreement(agent.greedy_actions(all_obs), q_star, env),
                   "lambda_max": math.nan, "active_fraction": math.nan}
            if run_cfg.probe is not None and buf.ready:
                rec.update(agent.probe(buf, run_cfg.probe))
            losses, norms = [], []
            records.append(rec)
            if on_record:
                on_record(rec)
    return records, agent


# ---------------------------------------------------------------------------
# SAC
# ---------------------------------------------------------------------------

def actor_arch(obs_dim: int, action_dim: int, cfg: AgentConfig) -> ArchSpec:
    return ArchSpec((obs_dim,), fc=list(cfg.hidden) + [2 * action_dim], backbone_fc=cfg.backbone_layers,
                    activation=cfg.activation, layernorm=cfg.layernorm)


def critic_arch(obs_dim: int, action_dim: int, cfg: AgentConfig) -> ArchSpec:
    return ArchSpec((obs_dim + action_dim,), fc=list(cfg.hidden) + [1], backbone_fc=cfg.backbone_layers,
                    activation=cfg.activation, layernorm=cfg.layernorm)


def squashed_gaussian(out: Tensor, xi: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Reparameterized tanh-Gaussian sample: returns (action, log_prob, pre-tanh mean).

    ``out`` holds the mean and an unconstrained log-std per action dimension.
    The pre-tanh sample is clamped to +-10 so the log-det term stays finite.
    """
    d = out.shape[1] // 2
    mu = T.index(out, (slice(None), slice(0, d)))
    raw = T.index(out, (slice(None), slice(d, 2 * d)))
    log_std = T.add(LOG_STD_MIN, T.mul(0.5 * (LOG_STD_MAX - LOG_STD_MIN), T.add(T.tanh(raw), 1.0)))
    u = T.clip(T.add(mu, T.mul(T.exp(log_std), xi)), -PRE_TANH_CLAMP, PRE_TANH_CLAMP)
    a = T.tanh(u)
    gauss = T.sub(T.sum_(T.mul(-0.5, T.square(T.Tensor(xi))), 1) - 0.5 * d * math.log(2 * math.pi),
                  T.sum_(log_std, 1))
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    log_det = T.sum_(T.mul(2.0, T.sub(T.sub(math.log(2.0), u), T.softplus(T.mul(-2.0, u)))), 1)
    return a, T.sub(gauss, log_det), mu


def _critic_in(s: np.ndarray | Tensor, a: np.ndarray | Tensor) -> Tensor:
    return T.concat([T._lift(s), T._lift(a)], axis=1)


class SACAgent:
    def __init__(self, obs_dim: int, action_dim: int, cfg: AgentConfig, seed: int):
        self.cfg = cfg
        self.action_dim = action_dim
        self.actor = build_network(actor_arch(obs_dim, action_dim, cfg), rngs.int_seed(seed, "init/actor"))
        self.critics = [build_network(critic_arch(obs_dim, action_dim, cfg), rngs.int_seed(seed, f"init/critic{i}"))
                        for i in (1, 2)]
        self.targets = [c.copy() for c in self.critics]
        self.log_alpha = Tensor(np.array([math.log(cfg.init_temperature)]), requires_grad=True)
        self.target_entropy = -float(action_dim) if cfg.target_entropy is None else cfg.target_entropy
        base = cfg.optimizer
        mk = lambda params, lr: Optimizer(params, OptimizerConfig(  # noqa: E731
            base.kind, lr if lr is not None else base.lr, base.momentum, base.betas, base.eps, base.weight_decay,
            base.max_grad_norm))
        self.critic_opts = [mk(c.parameters(), None) for c in self.critics]
        self.actor_opt = mk(self.actor.parameters(), cfg.actor_lr)
        self.alpha_opt = mk([self.log_alpha], cfg.alpha_lr)
        self.update_rng = rngs.stream(seed, "updates")
        self.explore_rng = rngs.stream(seed, "explore")
        self.reset_rng = rngs.stream(seed, "reset")
        self.updates = 0
        self.alpha_floor_hits = 0
        self.resets: list = []

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha.data[0]))

    def groups(self) -> list[list[Tensor]]:
        return [self.critics[0].parameters(), self.critics[1].parameters(), self.actor.parameters(), [self.log_alpha]]

    def sam_configs(self) -> list[SamConfig]:
        c = self.cfg
        return [c.sam, c.sam, c.actor_sam, c.alpha_sam]

    def act(self, obs, explore: bool = True) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64).reshape(1, -1)
        with T.no_grad():
            out = self.actor(obs)
            if not explore:
                d = self.action_dim
                return np.tanh(np.clip(out.data[0, :d], -PRE_TANH_CLAMP, PRE_TANH_CLAMP))
            a, _, _ = squashed_gaussian(out, self.explore_rng.standard_normal((1, self.action_dim)))
        return a.data[0]

    def losses(self, batch: Batch, xi_next: np.ndarray, xi_pi: np.ndarray) -> dict[str, Any]:
        """All SAC objectives at the current parameter values (target uses the current actor)."""
        alpha = self.alpha
        with T.no_grad():
            a2, logp2, _ = squashed_gaussian(self.actor(batch.s_next), xi_next)
            sa2 = _critic_in(batch.s_next, a2.data)
            q_next = np.minimum(self.targets[0](sa2).data[:, 0], self.targets[1](sa2).data[:, 0])
            y = batch.r + self.cfg.gamma * (1.0 - batch.done) * (q_next - alpha * logp2.data)
        sa = _critic_in(batch.s, batch.a)
        critic_losses = [T.squared_error(T.reshape(c(sa), (len(batch),)), y) for c in self.critics]
        a_pi, logp, _ = squashed_gaussian(self.actor(batch.s), xi_pi)
        sa_pi = _critic_in(batch.s, a_pi)
        q_pi = T.minimum(T.reshape(self.critics[0](sa_pi), (len(batch),)),
                         T.reshape(self.critics[1](sa_pi), (len(batch),)))
        actor_loss = T.mean(T.sub(T.mul(alpha, logp), q_pi))
        entropy_gap = logp.data + self.target_entropy
        alpha_loss = T.mean(T.mul(T.mul(-1.0, T.exp(self.log_alpha)), T.Tensor(entropy_gap)))
        return {"critic": critic_losses, "actor": actor_loss, "alpha": alpha_loss, "y": y,
                "entropy": float(-np.mean(logp.data))}

    def gradients(self, batch: Batch, xi_next, xi_pi) -> tuple[list[list[np.ndarray]], dict]:
        L = self.losses(batch, xi_next, xi_pi)
        groups = self.groups()
        grads = [[g.data for g in T.grad(L["critic"][i], groups[i])] for i in (0, 1)]
        grads.append([g.data for g in T.grad(L["actor"], groups[2])])
        grads.append([g.data for g in T.grad(L["alpha"], groups[3])])
        for name, loss in (("critic1", L["critic"][0]), ("critic2", L["critic"][1]), ("actor", L["actor"]),
                           ("alpha", L["alpha"])):
            if not math.isfinite(loss.item()):
                raise NumericError(f"sac update: non-finite {name} loss")
        return grads, L

    def update(self, buffer: ReplayBuffer) -> dict[str, float]:
        return sac_update(self, buffer)

    def probe(self, buffer: ReplayBuffer, probe: ProbeConfig) -> dict[str, float]:
        b = buffer.sample(min(probe.probe_batch_size, len(buffer)), rngs.stream(probe.seed, "probe", self.updates))
        xi = np.zeros((len(b), self.action_dim))
        y = self.losses(b, xi, xi)["y"]
        return _probe(self.critics[0], _critic_in(b.s, b.a).data,
                      lambda out: T.squared_error(T.reshape(out, (len(b),)), y), probe)


def sac_perturbations(grads: Sequence[Sequence[np.ndarray]], configs: Sequence[SamConfig]
                      ) -> tuple[list[list[np.ndarray] | None], list[bool]]:
    """Per-group ``rho * g / ||g||``; ``None`` for groups whose SAM is off or degenerate."""
    eps, degenerate = [], []
    for g, cfg in zip(grads, configs):
        if not cfg.active:
            eps.append(None)
            degenerate.append(False)
            continue
        flat = np.concatenate([x.reshape(-1) for x in g])
        e, deg = sam_perturbation(flat, cfg.rho)
        degenerate.append(deg)
        if deg:
            eps.append(None)
            continue
        out, off = [], 0
        for x in g:
            out.append(e[off:off + x.size].reshape(x.shape))
            off += x.size
        eps.append(out)
    return eps, degenerate


def sac_update(agent: SACAgent, buffer: ReplayBuffer) -> dict[str, float]:
    """Algorithm-2 step: gradients, optional per-group SAM perturbation and re-evaluation, updates, Polyak."""
    cfg = agent.cfg
    rng = agent.update_rng
    batch = buffer.sample(cfg.batch_size, rng)
    shape = (len(batch), agent.action_dim)
    xi_next, xi_pi = rng.standard_normal(shape), rng.standard_normal(shape)
    configs = agent.sam_configs()
    groups = agent.groups()
    any_sam = any(c.active for c in configs)
    scheme = cfg.sam.noise_scheme if cfg.sam.active else cfg.actor_sam.noise_scheme
    if any_sam and scheme == "noiseless":
        grads, L = agent.gradients(batch, np.zeros(shape), np.zeros(shape))
    else:
        grads, L = agent.gradients(batch, xi_next, xi_pi)
    metrics = {"critic_loss": 0.5 * (L["critic"][0].item() + L["critic"][1].item()), "actor_loss": L["actor"].item(),
               "entropy": L["entropy"], "grad_norm": math.sqrt(sum(float(np.vdot(x, x)) for x in grads[0]))}
    if any_sam:
        eps, _ = sac_perturbations(grads, configs)
        if any(e is not None for e in eps):
            saved = [[p.data for p in grp] for grp in groups]
            try:
                for grp, e in zip(groups, eps):
                    if e is not None:
                        for p, d in zip(grp, e):
                            p.data = p.data + d
                if scheme == "independent":
                    xi_next, xi_pi = rng.standard_normal(shape), rng.standard_normal(shape)
                sam_grads, _ = agent.gradients(batch, xi_next, xi_pi)
            finally:
                for grp, arrs in zip(groups, saved):
                    for p, w in zip(grp, arrs):
                        p.data = w
            # every group takes its gradient at the jointly perturbed point, perturbed itself or not
            grads = sam_grads
    for i in (0, 1):
        base_step(groups[i], grads[i], agent.critic_opts[i])
    base_step(groups[2], grads[2], agent.actor_opt)
    base_step(groups[3], grads[3], agent.alpha_opt)
    if agent.log_alpha.data[0] < math.log(ALPHA_FLOOR):
        agent.log_alpha.data = np.array([math.log(ALPHA_FLOOR)])
        agent.alpha_floor_hits += 1
    for tgt, c in zip(agent.targets, agent.critics):
        polyak(tgt, c, cfg.tau)
    agent.updates += 1
    if cfg.reset is not None and cfg.reset.due(agent.updates):
        for net, opt in [(agent.actor, agent.actor_opt)] + list(zip(agent.critics, agent.critic_opts)):
            ev = apply_reset(net, cfg.reset, agent.updates, agent.reset_rng, [opt])
            if ev is not None:
                agent.resets.append(ev)
    metrics["alpha"] = agent.alpha
    return metrics


@dataclass
class SACRunConfig:
    env_steps: int = 10_000
    step_limit: int = 50
    eval_every: int = 1000
    eval_episodes: int = 10
    probe: ProbeConfig | None = None


def evaluate_policy(policy: Callable[[np.ndarray], np.ndarray], episodes: int, seed: int, step_limit: int = 50
                    ) -> float:
    """Mean return of ``policy`` on point-mass episodes with seeded starts."""
    env = PointMass(step_limit, seed=seed)
    env.rng = rngs.stream(seed, "eval-starts")
    rets = []
    for _ in range(episodes):
        obs, ret, trunc = env.reset(), 0.0, False
        while not trunc:
            obs, r, _, trunc = env.step(policy(obs))
            ret += r
        rets.append(ret)
    return float(np.mean(rets))


def random_policy_return(episodes: int = 100, seed: int = 0, step_limit: int = 50) -> float:
    g = rngs.stream(seed, "random-policy")
    return evaluate_policy(lambda obs: g.uniform(-1.0, 1.0, 2), episodes, seed, step_limit)


def run_sac(agent_cfg: AgentConfig, run_cfg: SACRunConfig, seed: int,
            on_record: Callable[[dict], None] | None = None) -> tuple[list[dict], SACAgent]:
    env = PointMass(run_cfg.step_limit, seed=seed)
    agent = SACAgent(2, 2, agent_cfg, seed)
    buf = ReplayBuffer(agent_cfg.buffer_capacity, (2,), (2,), discrete=False, min_fill=agent_cfg.min_fill)
    warm = rngs.stream(seed, "warmup")
    records, recent, ep_ret = [], [], 0.0
    losses, norms = [], []
    obs = env.reset()
    for step in range(1, run_cfg.env_steps + 1):
        a = agent.act(obs) if buf.ready else warm.uniform(-1.0, 1.0, 2)
        obs2, r, done, trunc = env.step(a)
        buf.add(Transition(obs, a, r, obs2, int(done)))
        ep_ret += r
        obs = obs2
        if done or trunc:
            recent.append(ep_ret)
            ep_ret, obs = 0.0, env.reset()
        if buf.ready:
            for _ in range(agent_cfg.replay_ratio):
                m = agent.update(buf)
                losses.append(m["critic_loss"])
                norms.append(m["grad_norm"])
        if step % run_cfg.eval_every == 0 or step == run_cfg.env_steps:
            rec = {"step": step, "updates": agent.updates,
                   "episode_return": float(np.mean(recent[-10:])) if recent else math.nan,
                   "critic_loss": float(np.mean(losses)) if losses else math.nan,
                   "grad_norm": float(np.mean(norms)) if norms else math.nan,
                   "eval_return": evaluate_policy(lambda o: agent.act(o, explore=False), run_cfg.eval_episodes,
                                                  seed, run_cfg.step_limit),
                   "alpha": agent.alpha, "lambda_max": math.nan, "active_fraction": math.nan}
            if run_cfg.probe is not None and buf.ready:
                rec.update(agent.probe(buf, run_cfg.probe))
            losses, norms = [], []
            records.append(rec)
            if on_record:
                on_record(rec)
    return records, agent
