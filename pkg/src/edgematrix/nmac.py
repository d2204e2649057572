"""Networked multi-agent actor-critic for resource-cell sizing.

Per-node actors map a local state vector to a (cpu, mem) action in
[0,1]^2; per-agent critics score the global state-action during offline
training. Networks are plain numpy MLPs updated by fixed-rate gradient
descent so training is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import ServiceClass


class NmacError(RuntimeError):
    pass


class NonFiniteLoss(NmacError):
    pass


class NonFiniteGradient(NmacError):
    pass


class ShapeMismatch(NmacError):
    pass


# -- networks -----------------------------------------------------------------

class Mlp:
    """Fully-connected net: relu hidden layers, sigmoid or linear output."""

    def __init__(self, layer_dims: list[int], output_activation: str, rng: np.random.Generator):
        if output_activation not in ("sigmoid", "linear"):
            raise NmacError(f"unknown output activation {output_activation!r}")
        self.layer_dims = list(layer_dims)
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            self.weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
            self.biases.append(np.zeros(d_out))

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        a = np.atleast_2d(np.asarray(x, dtype=float))
        if a.shape[1] != self.layer_dims[0]:
            raise ShapeMismatch(f"input width {a.shape[1]}, net expects {self.layer_dims[0]}")
        if cache is not None:
            cache.append(a)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            if k < last:
                a = np.maximum(z, 0.0)
            elif self.output_activation == "sigmoid":
                a = 1.0 / (1.0 + np.exp(-z))
            else:
                a = z
            if cache is not None:
                cache.append(a)
        return a

    def backward(self, cache: list, grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. params and input."""
        acts = cache
        last = len(self.weights) - 1
        grads_W = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        out = acts[-1]
        if self.output_activation == "sigmoid":
            dz = grad_out * out * (1.0 - out)
        else:
            dz = grad_out.copy()
        for k in range(last, -1, -1):
            a_prev = acts[k]
            grads_W[k] = dz.T @ a_prev
            grads_b[k] = dz.sum(axis=0)
            da = dz @ self.weights[k]
            if k > 0:
                dz = da * (acts[k] > 0.0)
        return grads_W, grads_b, da

    def step(self, grads_W, grads_b, lr: float) -> None:
        """Gradient-descent step (pass a negative lr to ascend)."""
        for W, gW in zip(self.weights, grads_W):
            W -= lr * gW
        for b, gb in zip(self.biases, grads_b):
            b -= lr * gb

    def params(self):
        return self.weights + self.biases

    def to_dict(self) -> dict:
        return {"layer_dims": self.layer_dims,
                "output_activation": self.output_activation,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        net = cls(data["layer_dims"], data["output_activation"], np.random.default_rng(0))
        net.weights = [np.array(w, dtype=float) for w in data["weights"]]
        net.biases = [np.array(b, dtype=float) for b in data["biases"]]
        for W, d_in, d_out in zip(net.weights, net.layer_dims[:-1], net.layer_dims[1:]):
            if W.shape != (d_out, d_in):
                raise ShapeMismatch(f"weight shape {W.shape} does not match dims")
        return net

    def copy(self) -> "Mlp":
        return Mlp.from_dict(self.to_dict())


def make_actor(state_dim: int, rng: np.random.Generator, hidden: int = 64) -> Mlp:
    return Mlp([state_dim, hidden, hidden, 2], "sigmoid", rng)


def make_critic(input_dim: int, rng: np.random.Generator, hidden: int = 64) -> Mlp:
    return Mlp([input_dim, hidden, hidden, 1], "linear", rng)


# -- state encoding -----------------------------------------------------------

@dataclass
class StateSchema:
    """Fixed-length local observation layout for one agent.

    Sections: per-service frame demand, per-service static profile,
    the agent's live cells (zero-padded to the budget), and free capacity
    of the neighborhood (zero-padded to degree_cap + 1 nodes, self first).
    All entries land in [0, 1].
    """

    services: list[ServiceClass]
    cell_budget: int
    degree_cap: int

    def __post_init__(self):
        self.services = sorted(self.services, key=lambda s: s.key)
        self._r_max = max(s.memory_r for s in self.services)
        self._w_max = max(s.compute_w for s in self.services)
        self._t_max = max(s.max_response_t for s in self.services)

    @property
    def size(self) -> int:
        return 5 * len(self.services) + 3 * self.cell_budget + 2 * (self.degree_cap + 1)

    def encode(self, demand: dict[tuple[int, int], float],
               cell_chars: list[tuple[float, float, float]],
               free_fracs: list[tuple[float, float]]) -> np.ndarray:
        parts = []
        for s in self.services:
            lam = demand.get(s.key, 0.0)
            parts.append(lam / (1.0 + lam))
        for s in self.services:
            parts.extend([s.memory_r / self._r_max, s.compute_w / self._w_max,
                          s.max_response_t / self._t_max, s.exec_time_o / self._t_max])
        cells = list(cell_chars)[: self.cell_budget]
        for w_norm, r_norm, u_edge in cells:
            parts.extend([w_norm, r_norm, u_edge])
        parts.extend([0.0] * (3 * (self.cell_budget - len(cells))))
        nbrs = list(free_fracs)[: self.degree_cap + 1]
        for cpu_frac, mem_frac in nbrs:
            parts.extend([cpu_frac, mem_frac])
        parts.extend([0.0] * (2 * (self.degree_cap + 1 - len(nbrs))))
        return np.clip(np.array(parts, dtype=float), 0.0, 1.0)


# -- replay -------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    global_state: np.ndarray      # (N, state_dim)
    joint_action: np.ndarray      # (N, 2)
    rewards: np.ndarray           # (N,)
    next_global_state: np.ndarray # (N, state_dim)


class ReplayBuffer:
    """Ring buffer with seeded uniform batch sampling."""

    def __init__(self, capacity: int = 100_000, batch_size: int = 64, seed: int = 0):
        self.capacity = capacity
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._store: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._store)

    def push(self, t: Transition) -> None:
        if len(self._store) < self.capacity:
            self._store.append(t)
        else:
            self._store[self._next] = t
            self._next = (self._next + 1) % self.capacity

    def sample(self) -> list[Transition]:
        if len(self._store) < self.batch_size:
            raise NmacError("buffer smaller than batch size")
        idx = self._rng.integers(0, len(self._store), size=self.batch_size)
        return [self._store[k] for k in idx]


# -- core update rules --------------------------------------------------------

def act(actor: Mlp, state: np.ndarray, noise_std: float,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic policy output plus optional exploration noise."""
    a = actor.forward(state)[0]
    if noise_std > 0.0:
        if rng is None:
            raise NmacError("noise requires an rng")
        a = a + rng.normal(0.0, noise_std, size=a.shape)
    return np.clip(a, 0.0, 1.0)


def critic_target(r: float, gamma: float, target_actors: list[Mlp], target_critic: Mlp,
                  next_states: np.ndarray, terminal: bool = False) -> float:
    """Bellman target: r + gamma * Q'(s', a') with a' from the target actors."""
    if terminal or gamma == 0.0:
        return float(r)
    acts = np.concatenate([mu.forward(next_states[j])[0]
                           for j, mu in enumerate(target_actors)])
    q_in = np.concatenate([next_states.ravel(), acts])
    return float(r + gamma * target_critic.forward(q_in)[0, 0])


def _check_finite(value, what: str, exc) -> None:
    if not np.all(np.isfinite(value)):
        raise exc(f"non-finite {what}")


def update_critic(critic: Mlp, inputs: np.ndarray, targets: np.ndarray,
                  lr: float = 0.01) -> float:
    """One gradient-descent step on mean squared TD error; returns the loss."""
    cache: list = []
    q = critic.forward(inputs, cache)[:, 0]
    err = q - targets
    loss = float(np.mean(err ** 2))
    _check_finite(loss, "critic loss", NonFiniteLoss)
    grad_out = (2.0 * err / len(err))[:, None]
    gW, gb, _ = critic.backward(cache, grad_out)
    critic.step(gW, gb, lr)
    return loss


def update_actor(actor: Mlp, critic: Mlp, local_states: np.ndarray,
                 critic_inputs: np.ndarray, action_slice: slice,
                 lr: float = 0.01) -> float:
    """Deterministic policy gradient ascent step.

    critic_inputs must already contain the actor's fresh actions at
    action_slice; other agents' actions stay at their batch values.
    Returns the mean critic value before the step.
    """
    B = len(local_states)
    c_cache: list = []
    q = critic.forward(critic_inputs, c_cache)
    j_val = float(np.mean(q))
    grad_out = np.full((B, 1), 1.0 / B)
    _, _, d_in = critic.backward(c_cache, grad_out)
    dq_da = d_in[:, action_slice]
    _check_finite(dq_da, "action gradient", NonFiniteGradient)
    a_cache: list = []
    actor.forward(local_states, a_cache)
    gW, gb, _ = actor.backward(a_cache, dq_da)
    for g in gW:
        _check_finite(g, "actor gradient", NonFiniteGradient)
    actor.step(gW, gb, -lr)  # ascend
    return j_val


def soft_update(target: Mlp, online: Mlp, tau_soft: float = 0.01) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if target.layer_dims != online.layer_dims:
        raise ShapeMismatch("target and online layer dims differ")
    for pt, po in zip(target.params(), online.params()):
        pt *= 1.0 - tau_soft
        pt += tau_soft * po


# -- policies and trainer -----------------------------------------------------

class RandomPolicy:
    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def act(self, agent: int, state: np.ndarray) -> np.ndarray:
        return self._rng.uniform(0.0, 1.0, size=2)


class StaticHalfPolicy:
    def act(self, agent: int, state: np.ndarray) -> np.ndarray:
        return np.array([0.5, 0.5])


class ActorPolicy:
    """Execution-mode policy: pure function of the local state only."""

    def __init__(self, actors: list[Mlp]):
        self.actors = actors

    def act(self, agent: int, state: np.ndarray) -> np.ndarray:
        return act(self.actors[agent], state, noise_std=0.0)


def baseline_policy(kind: str, seed: int = 0):
    if kind == "random":
        return RandomPolicy(seed)
    if kind == "static_half":
        return StaticHalfPolicy()
    if kind == "independent":
        return "independent"  # trainer mode marker; see NmacTrainer(centralized=False)
    raise NmacError(f"unknown baseline {kind!r}")


@dataclass
class TrainSettings:
    gamma: float = 0.95
    learning_rate: float = 0.01
    tau_soft: float = 0.01
    batch_size: int = 64
    buffer_capacity: int = 100_000
    update_rate: int = 1
    explore_episodes: int = 100
    noise_start: float = 0.3
    noise_end: float = 0.01
    hidden: int = 64


class NmacTrainer:
    """Offline centralized training, online distributed execution.

    centralized=False gives the independent-learner baseline: each critic
    sees only its own agent's (state, action).
    """

    def __init__(self, n_agents: int, state_dim: int, settings: TrainSettings | None = None,
                 seed: int = 0, centralized: bool = True):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.settings = settings or TrainSettings()
        self.centralized = centralized
        self.rng = np.random.default_rng(seed)
        s = self.settings
        critic_in = (n_agents * state_dim + 2 * n_agents) if centralized else (state_dim + 2)
        self.critic_input_dim = critic_in
        self.actors = [make_actor(state_dim, self.rng, s.hidden) for _ in range(n_agents)]
        self.critics = [make_critic(critic_in, self.rng, s.hidden) for _ in range(n_agents)]
        self.target_actors = [a.copy() for a in self.actors]
        self.target_critics = [c.copy() for c in self.critics]
        self.buffer = ReplayBuffer(s.buffer_capacity, s.batch_size,
                                   seed=int(self.rng.integers(2**31)))

    # -- batched target / input assembly

    def _critic_inputs(self, states: np.ndarray, actions: np.ndarray, agent: int) -> np.ndarray:
        B = states.shape[0]
        if self.centralized:
            return np.concatenate([states.reshape(B, -1), actions.reshape(B, -1)], axis=1)
        return np.concatenate([states[:, agent, :], actions[:, agent, :]], axis=1)

    def _action_slice(self, agent: int) -> slice:
        if self.centralized:
            base = self.n_agents * self.state_dim
            return slice(base + 2 * agent, base + 2 * agent + 2)
        return slice(self.state_dim, self.state_dim + 2)

    def update(self) -> dict:
        s = self.settings
        batch = self.buffer.sample()
        B = len(batch)
        states = np.stack([t.global_state for t in batch])       # (B, N, D)
        actions = np.stack([t.joint_action for t in batch])      # (B, N, 2)
        rewards = np.stack([t.rewards for t in batch])           # (B, N)
        nexts = np.stack([t.next_global_state for t in batch])   # (B, N, D)
        next_actions = np.stack(
            [self.target_actors[j].forward(nexts[:, j, :]) for j in range(self.n_agents)],
            axis=1)                                              # (B, N, 2)
        losses = []
        for i in range(self.n_agents):
            tgt_in = self._critic_inputs(nexts, next_actions, i)
            q_next = self.target_critics[i].forward(tgt_in)[:, 0]
            targets = rewards[:, i] + s.gamma * q_next
            cr_in = self._critic_inputs(states, actions, i)
            losses.append(update_critic(self.critics[i], cr_in, targets, s.learning_rate))
            fresh = self.actors[i].forward(states[:, i, :])
            act_mix = actions.copy()
            act_mix[:, i, :] = fresh
            ac_in = self._critic_inputs(states, act_mix, i)
            update_actor(self.actors[i], self.critics[i], states[:, i, :],
                         ac_in, self._action_slice(i), s.learning_rate)
            soft_update(self.target_actors[i], self.actors[i], s.tau_soft)
            soft_update(self.target_critics[i], self.critics[i], s.tau_soft)
        return {"critic_loss_mean": float(np.mean(losses))}

    def noise_std(self, episode: int, episodes: int) -> float:
        s = self.settings
        if episode < s.explore_episodes:
            return s.noise_start
        span = max(1, episodes - 1 - s.explore_episodes)
        frac = min(1.0, (episode - s.explore_episodes) / span)
        return s.noise_start + frac * (s.noise_end - s.noise_start)

    def policy(self) -> ActorPolicy:
        return ActorPolicy(self.actors)

    # -- checkpoints

    def to_dict(self) -> dict:
        return {"n_agents": self.n_agents, "state_dim": self.state_dim,
                "centralized": self.centralized,
                "actors": [a.to_dict() for a in self.actors],
                "critics": [c.to_dict() for c in self.critics]}

    @classmethod
    def from_dict(cls, data: dict, settings: TrainSettings | None = None,
                  seed: int = 0) -> "NmacTrainer":
        tr = cls(int(data["n_agents"]), int(data["state_dim"]), settings, seed,
                 centralized=bool(data.get("centralized", True)))
        tr.actors = [Mlp.from_dict(d) for d in data["actors"]]
        tr.critics = [Mlp.from_dict(d) for d in data["critics"]]
        for a in tr.actors:
            if a.layer_dims[0] != tr.state_dim:
                raise ShapeMismatch("checkpoint actor input does not match state schema")
        tr.target_actors = [a.copy() for a in tr.actors]
        tr.target_critics = [c.copy() for c in tr.critics]
        return tr


def train_offline(env, episodes: int, frames_per_episode: int, seed: int,
                  settings: TrainSettings | None = None,
                  centralized: bool = True,
                  checkpoint_hook=None) -> tuple[NmacTrainer, list[float]]:
    """Offline training loop: explore, store transitions, update per frame.

    env protocol: reset() -> (N, state_dim) array; step(actions) ->
    (next_states, per-agent rewards). Returns the trainer and the
    per-episode mean reward log.
    """
    settings = settings or TrainSettings()
    probe = env.reset()
    trainer = NmacTrainer(probe.shape[0], probe.shape[1], settings, seed, centralized)
    explore_rng = np.random.default_rng(seed + 1)
    noise_rng = np.random.default_rng(seed + 2)
    reward_log: list[float] = []
    frame_count = 0
    for ep in range(episodes):
        states = env.reset()
        ep_rewards = []
        for _ in range(frames_per_episode):
            if ep < settings.explore_episodes:
                actions = explore_rng.uniform(0.0, 1.0, size=(trainer.n_agents, 2))
            else:
                std = trainer.noise_std(ep, episodes)
                actions = np.stack([act(trainer.actors[i], states[i], std, noise_rng)
                                    for i in range(trainer.n_agents)])
            next_states, rewards = env.step(actions)
            trainer.buffer.push(Transition(states, actions, np.asarray(rewards),
                                           next_states))
            ep_rewards.append(float(np.mean(rewards)))
            if (ep >= settings.explore_episodes
                    and frame_count % settings.update_rate == 0
                    and len(trainer.buffer) >= settings.batch_size):
                trainer.update()
                if checkpoint_hook is not None:
                    checkpoint_hook(trainer, ep, frame_count)
            states = next_states
            frame_count += 1
        reward_log.append(float(np.mean(ep_rewards)) if ep_rewards else 0.0)
    return trainer, reward_log
