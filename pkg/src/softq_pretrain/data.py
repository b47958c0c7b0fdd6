"""Replay buffer, reward-free demonstration datasets and expert generation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .losses import DemoBatch, ReplayBatch
from .mdp import Simulator, TabularMDP, Transition
from .soft import softmax_policy

DEMO_FORMAT = "softq-demos"
DEMO_VERSION = 1


class ReplayBuffer:
    """Fixed-capacity ring of transitions; sampling is uniform with replacement."""

    def __init__(self, capacity: int, state_shape: tuple[int, ...] = (), state_dtype=np.int64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity,) + state_shape, dtype=state_dtype)
        self.next_states = np.zeros_like(self.states)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        self.add(t.state, t.action, t.reward, t.next_state, t.done)

    def add(self, state, action, reward, next_state, done) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _slot(self, k: int) -> int:
        """Storage index of the k-th oldest entry."""
        start = self.cursor if self.size == self.capacity else 0
        return (start + k) % self.capacity

    def __getitem__(self, k: int) -> Transition:
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = self._slot(k)
        return Transition(self.states[i].item() if self.states.ndim == 1 else self.states[i],
                          int(self.actions[i]), float(self.rewards[i]),
                          self.next_states[i].item() if self.states.ndim == 1 else self.next_states[i],
                          bool(self.dones[i]))

    def sample(self, n: int, rng) -> ReplayBatch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        rng = np.random.default_rng(rng)
        idx = rng.integers(0, self.size, size=n)
        return ReplayBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])


def replay_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def replay_sample(buf: ReplayBuffer, n: int, rng_seed) -> ReplayBatch:
    return buf.sample(n, rng_seed)


@dataclass
class DemoMeta:
    env_name: str
    env_hash: str
    temperature: float
    noise_rate: float
    seed: int
    n_steps: int
    measured_return: float
    n_episodes: int = 0
    generator: str = "tempered-soft-optimal"


@dataclass
class DemoDataset:
    """Expert ``(state, action)`` steps. There is deliberately no reward field."""

    episodes: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    meta: DemoMeta

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.episodes) == len(self.steps) == len(self.states) == n):
            raise ValueError("demo columns must have equal length")
        for i in range(1, n):
            if self.episodes[i] == self.episodes[i - 1] and self.steps[i] <= self.steps[i - 1]:
                raise ValueError(f"step index must increase within episode {self.episodes[i]}")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, DemoDataset):
            return NotImplemented
        return (
            self.meta == other.meta
            and np.array_equal(self.episodes, other.episodes)
            and np.array_equal(self.steps, other.steps)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )

    def buffer(self) -> "DemoBuffer":
        return DemoBuffer(self.states, self.actions)


class DemoBuffer:
    """Training-side view of a demo set: states and actions only.

    ``reads`` counts sampled batches so callers can audit when demos are used.
    """

    __slots__ = ("_states", "_actions", "reads", "last_read_step")

    def __init__(self, states: np.ndarray, actions: np.ndarray):
        if len(actions) == 0:
            raise ValueError("demo buffer is empty")
        self._states = states
        self._actions = actions
        self.reads = 0
        self.last_read_step = -1

    def __len__(self):
        return len(self._actions)

    def sample(self, n: int, rng, step: int = -1) -> DemoBatch:
        idx = rng.integers(0, len(self._actions), size=n)
        self.reads += 1
        self.last_read_step = step
        return DemoBatch(self._states[idx], self._actions[idx])


def behavior_policy(q_star: np.ndarray, temperature: float, noise_rate: float) -> np.ndarray:
    """``(1 - noise) * softmax(q / T) + noise * uniform``; ``T = 0`` is greedy with uniform ties."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    A = q_star.shape[1]
    if temperature == 0:
        best = q_star == q_star.max(axis=1, keepdims=True)
        base = best / best.sum(axis=1, keepdims=True)
    else:
        base = softmax_policy(q_star, temperature)
    return (1.0 - noise_rate) * base + noise_rate / A


def generate_demos(
    mdp: TabularMDP,
    q_star: np.ndarray,
    temperature: float,
    noise_rate: float,
    n_steps: int,
    seed: int,
    max_episode_steps: int = 100,
) -> DemoDataset:
    """Roll out a degraded soft-optimal expert and keep only ``(s, a)``.

    Episodes run to termination or the time limit; the dataset is cut at
    ``n_steps`` records. The mean return over all episodes rolled is kept in
    the metadata for reporting.
    """
    if q_star.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"q_star shape {q_star.shape} does not match the MDP {(mdp.n_states, mdp.n_actions)}")
    pol = behavior_policy(q_star, temperature, noise_rate)
    cdf = np.cumsum(pol, axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng(seed)
    sim = Simulator(mdp, max_episode_steps, rng)
    eps, steps, states, actions, returns = [], [], [], [], []
    ep = 0
    while len(actions) < n_steps:
        s = sim.reset()
        total, t = 0.0, 0
        while True:
            a = int(np.searchsorted(cdf[s], rng.random(), side="right"))
            eps.append(ep)
            steps.append(t)
            states.append(s)
            actions.append(a)
            s, r, done, truncated = sim.step(a)
            total += r
            t += 1
            if done or truncated:
                break
        returns.append(total)
        ep += 1
    meta = DemoMeta(
        env_name=mdp.name,
        env_hash=mdp.content_hash(),
        temperature=float(temperature),
        noise_rate=float(noise_rate),
        seed=int(seed),
        n_steps=int(n_steps),
        measured_return=float(np.mean(returns)) if returns else 0.0,
        n_episodes=len(returns),
    )
    return DemoDataset(
        episodes=np.asarray(eps[:n_steps], dtype=np.int64),
        steps=np.asarray(steps[:n_steps], dtype=np.int64),
        states=np.asarray(states[:n_steps], dtype=np.int64),
        actions=np.asarray(actions[:n_steps], dtype=np.int64),
        meta=meta,
    )


class DemoFormatError(ValueError):
    pass


_STEP_KEYS = {"ep", "t", "s", "a"}


def demo_save(ds: DemoDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": DEMO_FORMAT, "version": DEMO_VERSION, "meta": asdict(ds.meta)}) + "\n")
        for ep, t, s, a in zip(ds.episodes, ds.steps, ds.states, ds.actions):
            s_val = s.tolist() if np.ndim(s) else int(s)
            fh.write(json.dumps({"ep": int(ep), "t": int(t), "s": s_val, "a": int(a)}) + "\n")


def demo_load(path, env: TabularMDP | None = None) -> DemoDataset:
    """Parse a demo file; with ``env`` given, its content hash must match."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DemoFormatError(f"{path}: empty file, missing meta record")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DemoFormatError(f"{path}:1: malformed meta record ({exc.msg})") from None
    if not isinstance(head, dict) or head.get("format") != DEMO_FORMAT or "meta" not in head:
        raise DemoFormatError(f"{path}:1: missing meta record")
    if head.get("version") != DEMO_VERSION:
        raise DemoFormatError(f"{path}:1: unsupported version {head.get('version')!r}")
    try:
        meta = DemoMeta(**head["meta"])
    except TypeError as exc:
        raise DemoFormatError(f"{path}:1: bad meta record ({exc})") from None
    if env is not None and env.content_hash() != meta.env_hash:
        raise DemoFormatError(
            f"{path}: environment hash mismatch: file has {meta.env_hash}, environment {env.name!r} is {env.content_hash()}"
        )
    eps, steps, states, actions = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DemoFormatError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DemoFormatError(f"{path}:{lineno}: record must be an object")
        keys = set(rec)
        if keys != _STEP_KEYS:
            extra = sorted(keys - _STEP_KEYS)
            missing = sorted(_STEP_KEYS - keys)
            raise DemoFormatError(f"{path}:{lineno}: schema violation (unexpected {extra}, missing {missing})")
        if not all(isinstance(rec[k], int) for k in ("ep", "t", "a")):
            raise DemoFormatError(f"{path}:{lineno}: ep, t and a must be integers")
        eps.append(rec["ep"])
        steps.append(rec["t"])
        states.append(rec["s"])
        actions.append(rec["a"])
    state_arr = np.asarray(states)
    if state_arr.size == 0:
        state_arr = np.zeros(0, dtype=np.int64)
    elif state_arr.dtype.kind not in "iuf":
        raise DemoFormatError(f"{path}: states must be integers or number arrays")
    return DemoDataset(
        episodes=np.asarray(eps, dtype=np.int64),
        steps=np.asarray(steps, dtype=np.int64),
        states=state_arr,
        actions=np.asarray(actions, dtype=np.int64),
        meta=meta,
    )
