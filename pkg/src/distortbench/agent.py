"""Dueling-DQN policy over (n_add, n_rem[, filter]) actions.

The network is small enough (two 128-wide hidden layers) that a hand-rolled
numpy implementation with explicit backprop is simpler to keep deterministic
and checkpoint bit-exactly than pulling in a deep-learning framework.

Reward convention: actions that move probability in the attack's favor per
unit of added L2 get positive reward. For untargeted runs the tracked
quantity is the dilution 1 - P_GT; printed forms with the opposite sign
exist, but a reward that punishes successful dilution cannot train a useful
policy, so the favorable-positive sign is used throughout.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

ADD_CHOICES = (1, 2, 4, 8, 16)
REM_CHOICES = (0, 1, 2, 4)

EPS_DIV = 1e-6


@dataclass(frozen=True)
class ActionSpec:
    n_add: int
    n_rem: int
    filter: str | None = None  # set in mixed-filter mode only


def build_action_space(filters: tuple[str, ...] | None = None) -> tuple[ActionSpec, ...]:
    """Discrete action grid; index 0 is always (n_add=1, n_rem=0).

    Single-filter mode leaves the filter slot empty (20 actions); mixed mode
    repeats the grid per filter, filter-major after the grid, so index 0
    stays the minimal greedy-add move.
    """
    grid = [ActionSpec(a, r) for a in ADD_CHOICES for r in REM_CHOICES]
    if not filters or len(filters) == 1:
        return tuple(grid)
    return tuple(
        ActionSpec(spec.n_add, spec.n_rem, name) for name in filters for spec in grid
    )


@dataclass(frozen=True)
class RewardTerms:
    delta_p: float  # dilution change (untargeted) or target-prob change (targeted)
    delta_l2: float
    reward: float


def compute_reward(
    mode: str,
    p_tracked_before: float,
    p_tracked_after: float,
    l2_before: float,
    l2_after: float,
) -> RewardTerms:
    """Normalized per-step reward: probability movement over L2 movement.

    The divisor is |delta L2| floored at EPS_DIV; removal-dominated steps can
    shrink L2, and the floor keeps the ratio finite and the sign meaningful.
    """
    if mode == "untargeted":
        delta_p = (1.0 - p_tracked_after) - (1.0 - p_tracked_before)
    elif mode == "targeted":
        delta_p = p_tracked_after - p_tracked_before
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    delta_l2 = l2_after - l2_before
    reward = delta_p / max(abs(delta_l2), EPS_DIV)
    return RewardTerms(delta_p=delta_p, delta_l2=delta_l2, reward=reward)


class DuelingQNet:
    """state -> trunk (2x128, ReLU) -> value scalar + per-action advantages.

    Q(s, a) = V(s) + A(s, a) - mean_a A(s, a), so shifting every advantage by
    a constant cannot change Q (the dueling identity).
    """

    HIDDEN = 128
    PARAM_NAMES = ("w1", "b1", "w2", "b2", "wv", "bv", "wa", "ba")

    def __init__(self, state_dim: int, n_actions: int, rng: np.random.Generator | None = None):
        if state_dim < 1 or n_actions < 1:
            raise InvalidArgumentError("state_dim and n_actions must be positive")
        self.state_dim = state_dim
        self.n_actions = n_actions
        rng = rng or np.random.default_rng(0)
        h = self.HIDDEN

        def he(fan_in, shape):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        self.w1 = he(state_dim, (state_dim, h))
        self.b1 = np.zeros(h)
        self.w2 = he(h, (h, h))
        self.b2 = np.zeros(h)
        self.wv = he(h, (h, 1))
        self.bv = np.zeros(1)
        self.wa = he(h, (h, n_actions))
        self.ba = np.zeros(n_actions)

    def params(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def copy_from(self, other: "DuelingQNet") -> None:
        for name in self.PARAM_NAMES:
            getattr(self, name)[...] = getattr(other, name)

    def clone(self) -> "DuelingQNet":
        twin = DuelingQNet(self.state_dim, self.n_actions)
        twin.copy_from(self)
        return twin

    def _forward_full(self, states: np.ndarray):
        z1 = states @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(z2, 0.0)
        value = h2 @ self.wv + self.bv
        adv = h2 @ self.wa + self.ba
        q = value + adv - adv.mean(axis=1, keepdims=True)
        return q, (states, z1, h1, z2, h2)

    def forward(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        squeeze = states.ndim == 1
        if squeeze:
            states = states[None, :]
        if states.ndim != 2 or states.shape[1] != self.state_dim:
            raise InvalidArgumentError(
                f"state shape {states.shape} does not match input size {self.state_dim}"
            )
        q, _ = self._forward_full(states)
        return q[0] if squeeze else q

    def backward(self, cache, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dLoss/dQ for the cached forward."""
        states, z1, h1, z2, h2 = cache
        # Q_j = V + A_j - mean_k A_k:
        #   dL/dA = dq - (1/n) * rowsum(dq);  dL/dV = rowsum(dq)
        row_sum = dq.sum(axis=1, keepdims=True)
        dadv = dq - row_sum / self.n_actions
        dvalue = row_sum
        grads = {
            "wa": h2.T @ dadv,
            "ba": dadv.sum(axis=0),
            "wv": h2.T @ dvalue,
            "bv": dvalue.sum(axis=0),
        }
        dh2 = dadv @ self.wa.T + dvalue @ self.wv.T
        dz2 = dh2 * (z2 > 0.0)
        grads["w2"] = h1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        dh1 = dz2 @ self.w2.T
        dz1 = dh1 * (z1 > 0.0)
        grads["w1"] = states.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        return grads


def q_values(net: DuelingQNet, state: np.ndarray) -> np.ndarray:
    return net.forward(state)


def select_action(
    net: DuelingQNet,
    state: np.ndarray,
    epsilon: float,
    valid: np.ndarray,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy over the valid actions; greedy ties break to the
    lowest index. The valid mask must leave at least one action open
    (index 0, the pure single add, is valid by construction)."""
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (net.n_actions,) or not valid.any():
        raise InvalidArgumentError("validity mask must enable at least one action")
    if rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(valid)))
    q = net.forward(state)
    masked = np.where(valid, q, -np.inf)
    return int(np.argmax(masked))


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Uniform-sampling ring buffer; safe to feed from several rollout threads."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._lock = threading.Lock()

    def push(self, transition: Transition) -> None:
        if not np.isfinite(transition.reward):
            raise InvalidArgumentError("transition reward must be finite")
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(transition)
            else:
                self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        with self._lock:
            if not self._items:
                raise InvalidArgumentError("cannot sample from an empty buffer")
            idx = rng.integers(0, len(self._items), size=batch_size)
            return [self._items[i] for i in idx]


def td_update(
    net: DuelingQNet,
    target_net: DuelingQNet,
    batch: list[Transition],
    gamma: float,
    lr: float,
) -> float:
    """One SGD step on the mean squared TD error; returns the pre-step loss.

    Targets are r + gamma * max_a Q_target(s', a), or plain r on terminal
    transitions. A non-finite loss aborts training loudly rather than letting
    a diverged net keep driving episodes.
    """
    if not batch:
        raise InvalidArgumentError("td_update needs a non-empty batch")
    states = np.stack([t.state for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.intp)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    done = np.array([t.done for t in batch], dtype=bool)

    q, cache = net._forward_full(states)
    q_taken = q[np.arange(len(batch)), actions]
    next_q = target_net.forward(next_states)
    targets = rewards + gamma * np.where(done, 0.0, next_q.max(axis=1))
    diff = q_taken - targets
    with np.errstate(over="ignore"):
        loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise InvalidArgumentError(
            f"TD loss diverged (loss={loss}, max |Q|={np.max(np.abs(q)):.3g})"
        )

    dq = np.zeros_like(q)
    dq[np.arange(len(batch)), actions] = 2.0 * diff / len(batch)
    grads = net.backward(cache, dq)
    for name in net.PARAM_NAMES:
        getattr(net, name)[...] -= lr * grads[name]
    return loss


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    replay_capacity: int = 10_000
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 5_000
    target_sync: int = 500


class DQNLearner:
    """Owns the online/target nets, the replay buffer, and the schedules."""

    def __init__(
        self,
        state_dim: int,
        n_actions: int,
        config: LearnerConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.config = config or LearnerConfig()
        rng = rng or np.random.default_rng(0)
        self.net = DuelingQNet(state_dim, n_actions, rng=rng)
        self.target = self.net.clone()
        self.buffer = ReplayBuffer(self.config.replay_capacity)
        self.rng = rng
        self.agent_steps = 0
        self.updates = 0

    def epsilon(self) -> float:
        cfg = self.config
        frac = min(self.agent_steps / cfg.eps_decay_steps, 1.0)
        return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)

    def act(self, state: np.ndarray, valid: np.ndarray) -> int:
        action = select_action(self.net, state, self.epsilon(), valid, self.rng)
        self.agent_steps += 1
        return action

    def observe(self, transition: Transition) -> float | None:
        """Store a transition and, once warm, take one training step."""
        self.buffer.push(transition)
        cfg = self.config
        if len(self.buffer) < cfg.batch_size:
            return None
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        loss = td_update(self.net, self.target, batch, cfg.gamma, cfg.lr)
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.target.copy_from(self.net)
        return loss


MAGIC_AGENT = b"DBAGT1"


def save_agent(path, learner: DQNLearner, config_hash: str = "") -> None:
    """Checkpoint both nets and the schedule counters; float64 arrays are
    stored raw so load/save round-trips bit-exactly."""
    net = learner.net
    arrays = net.params() + learner.target.params()
    header = {
        "config_hash": config_hash,
        "state_dim": net.state_dim,
        "n_actions": net.n_actions,
        "agent_steps": learner.agent_steps,
        "updates": learner.updates,
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC_AGENT, struct.pack("<I", len(blob)), blob]
    out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    Path(path).write_bytes(b"".join(out))


def load_agent(path, config: LearnerConfig | None = None) -> tuple[DQNLearner, str]:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC_AGENT:
        raise InvalidArgumentError(f"{path}: bad magic {raw[:6]!r}")
    (blob_len,) = struct.unpack_from("<I", raw, 6)
    header = json.loads(raw[10 : 10 + blob_len].decode("utf-8"))
    learner = DQNLearner(header["state_dim"], header["n_actions"], config=config)
    learner.agent_steps = header["agent_steps"]
    learner.updates = header["updates"]
    offset = 10 + blob_len
    arrays = learner.net.params() + learner.target.params()
    for arr, shape in zip(arrays, header["shapes"]):
        size = int(np.prod(shape)) * 8
        if tuple(shape) != arr.shape:
            raise InvalidArgumentError(f"{path}: shape mismatch {shape} vs {arr.shape}")
        arr[...] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += size
    if offset != len(raw):
        raise InvalidArgumentError(f"{path}: trailing bytes in checkpoint")
    return learner, header["config_hash"]
