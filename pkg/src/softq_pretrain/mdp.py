"""Finite MDPs: the tabular model, builders, serialization and rollouts.

Rewards are stored as expected values ``reward[s, a]``. Every terminal state
is absorbing with zero reward. Episode time limits are a rollout concern and
are never encoded in the state.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MDP_FORMAT = "tabular-mdp"
MDP_VERSION = 1

# action order for grid worlds
UP, RIGHT, DOWN, LEFT = range(4)
_MOVES = {UP: (0, -1), RIGHT: (1, 0), DOWN: (0, 1), LEFT: (-1, 0)}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with transition tensor ``transition[s, a, s']``.

    Arrays are copied and made read-only on construction, so instances can
    be shared between threads.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal: np.ndarray
    name: str = "mdp"

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        mu = np.array(self.initial_dist, dtype=np.float64)
        term = np.array(self.terminal, dtype=bool)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if mu.shape != (S,) or term.shape != (S,):
            raise ValueError("initial_dist and terminal must have one entry per state")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R)) and np.all(np.isfinite(mu))):
            raise ValueError("MDP arrays must be finite")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        if np.any(mu[term] > 0):
            raise ValueError("terminal states cannot have initial probability")
        for s in np.flatnonzero(term):
            if not np.all(P[s, :, s] == 1.0) or np.any(R[s] != 0.0):
                raise ValueError(f"terminal state {s} must be absorbing with zero reward")
        for name, arr in (("transition", P), ("reward", R), ("initial_dist", mu), ("terminal", term)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "format": MDP_FORMAT,
            "version": MDP_VERSION,
            "name": self.name,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        if doc.get("format") != MDP_FORMAT:
            raise ValueError(f"not a {MDP_FORMAT} document")
        if doc.get("version") != MDP_VERSION:
            raise ValueError(f"unsupported MDP version {doc.get('version')!r}")
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        return cls(
            transition=np.asarray(doc["transition"], dtype=np.float64).reshape(S, A, S),
            reward=np.asarray(doc["reward"], dtype=np.float64).reshape(S, A),
            initial_dist=np.asarray(doc["initial_dist"], dtype=np.float64),
            terminal=np.asarray(doc["terminal"], dtype=bool),
            name=str(doc["name"]),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        """64-bit FNV-1a of the canonical serialization, as 16 hex digits."""
        return f"{fnv1a_64(self.canonical_json().encode('utf-8')):016x}"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TabularMDP":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def is_acyclic(self) -> bool:
        """True when no non-terminal state can be revisited, under any policy."""
        live = ~self.terminal
        adj = (self.transition.max(axis=1) > 0) & live[None, :]
        adj[~live] = False
        indeg = adj.sum(axis=0)
        queue = deque(np.flatnonzero(indeg == 0))
        seen = 0
        while queue:
            s = queue.popleft()
            seen += 1
            for t in np.flatnonzero(adj[s]):
                indeg[t] -= 1
                if indeg[t] == 0:
                    queue.append(t)
        return seen == self.n_states


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)
    seed: int | None = None

    def __len__(self):
        return len(self.transitions)

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))


@dataclass(frozen=True)
class GridWorldSpec:
    """Grid world layout. Cells are ``(x, y)`` with ``x < width``, ``y < height``."""

    width: int
    height: int
    goal: tuple[int, int]
    walls: frozenset = frozenset()
    step_reward: float = 0.0
    goal_reward: float = 1.0
    slip_prob: float = 0.0
    max_episode_steps: int = 100
    start: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        object.__setattr__(self, "goal", tuple(self.goal))
        if self.start is not None:
            object.__setattr__(self, "start", tuple(self.start))
            if self.start in self.walls or self.start == self.goal:
                raise ValueError("start must be a free non-goal cell")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have at least one cell")
        if self.goal in self.walls:
            raise ValueError("goal cannot be a wall")
        if not (0 <= self.goal[0] < self.width and 0 <= self.goal[1] < self.height):
            raise ValueError("goal outside the grid")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError("slip_prob must lie in [0, 1]")


def _grid_cells(spec: GridWorldSpec) -> list[tuple[int, int]]:
    return [
        (x, y)
        for y in range(spec.height)
        for x in range(spec.width)
        if (x, y) not in spec.walls
    ]


def grid_move(spec: GridWorldSpec, cell: tuple[int, int], action: int) -> tuple[int, int]:
    dx, dy = _MOVES[action]
    nxt = (cell[0] + dx, cell[1] + dy)
    if not (0 <= nxt[0] < spec.width and 0 <= nxt[1] < spec.height) or nxt in spec.walls:
        return cell
    return nxt


def build_gridworld(spec: GridWorldSpec) -> TabularMDP:
    """Build the tabular model of a slippery grid world.

    States enumerate the non-wall cells in row-major order, followed by one
    absorbing terminal. Moving into the goal pays ``goal_reward`` and ends
    the episode; every other move pays ``step_reward``. With probability
    ``slip_prob`` the chosen action is replaced by a uniformly random one.
    Episodes start at ``spec.start`` or, when unset, uniformly on non-goal
    cells.
    """
    cells = _grid_cells(spec)
    index = {c: i for i, c in enumerate(cells)}
    S, A = len(cells) + 1, 4
    term = S - 1
    goal = index[spec.goal]

    # effective action distribution after slipping
    mix = np.full((A, A), spec.slip_prob / A)
    mix[np.diag_indices(A)] += 1.0 - spec.slip_prob

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for c, s in index.items():
        for a in range(A):
            for b in range(A):
                p = mix[a, b]
                if p == 0.0:
                    continue
                if s == goal:
                    # unreachable in practice: start cells exclude the goal
                    P[s, a, term] += p
                    R[s, a] += p * spec.goal_reward
                    continue
                nxt = index[grid_move(spec, c, b)]
                if nxt == goal:
                    P[s, a, term] += p
                    R[s, a] += p * spec.goal_reward
                else:
                    P[s, a, nxt] += p
                    R[s, a] += p * spec.step_reward
    P[term, :, term] = 1.0

    if spec.start is not None:
        starts = [index[spec.start]]
    else:
        starts = [index[c] for c in cells if c != spec.goal]
    if not starts:
        raise ValueError("grid has no start cell besides the goal")
    _check_reachable(P, starts, term)
    mu = np.zeros(S)
    mu[starts] = 1.0 / len(starts)
    terminal = np.zeros(S, dtype=bool)
    terminal[term] = True
    name = f"grid{spec.width}x{spec.height}-slip{spec.slip_prob:g}"
    return TabularMDP(P, R, mu, terminal, name=name)


def _check_reachable(P: np.ndarray, starts: Sequence[int], term: int) -> None:
    adj = P.max(axis=1) > 0
    seen = {term}
    queue = deque([term])
    while queue:
        t = queue.popleft()
        for s in np.flatnonzero(adj[:, t]):
            if s not in seen:
                seen.add(int(s))
                queue.append(int(s))
    if not any(s in seen for s in starts):
        raise ValueError("goal is unreachable from every start cell")


def build_layered_mdp(n_layers: int, states_per_layer: int, n_actions: int, seed: int) -> TabularMDP:
    """Random finite-horizon MDP: layer k only feeds layer k + 1.

    Every trajectory has exactly ``n_layers`` decisions before reaching the
    absorbing terminal, so undiscounted returns are finite.
    """
    if min(n_layers, states_per_layer, n_actions) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    L, W, A = n_layers, states_per_layer, n_actions
    S = L * W + 1
    term = S - 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for k in range(L):
        for i in range(W):
            s = k * W + i
            R[s] = rng.uniform(-1.0, 1.0, size=A)
            if k == L - 1:
                P[s, :, term] = 1.0
            else:
                probs = rng.dirichlet(np.ones(W), size=A)
                P[s, :, (k + 1) * W:(k + 2) * W] = probs
    P[term, :, term] = 1.0
    # dirichlet draws can miss 1 by a few ulp
    P /= P.sum(axis=2, keepdims=True)
    mu = np.zeros(S)
    mu[:W] = rng.dirichlet(np.ones(W))
    terminal = np.zeros(S, dtype=bool)
    terminal[term] = True
    return TabularMDP(P, R, mu, terminal, name=f"layered-{L}x{W}x{A}-s{seed}")


def check_distribution(p: np.ndarray, where: str = "") -> None:
    p = np.asarray(p)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"policy emitted an invalid distribution {where}: {p}")


def rollout(
    mdp: TabularMDP,
    policy: Callable[[int], np.ndarray] | np.ndarray,
    max_steps: int,
    rng_seed,
) -> Trajectory:
    """Sample one episode.

    ``policy`` is either a callable ``state -> probs`` or an ``(S, A)``
    array of per-state action distributions.
    """
    rng = np.random.default_rng(rng_seed)
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    traj = Trajectory(seed=seed)
    if max_steps <= 0:
        return traj
    table = policy if not callable(policy) else None
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    for _ in range(max_steps):
        probs = table[s] if table is not None else np.asarray(policy(s), dtype=float)
        check_distribution(probs, f"at state {s}")
        a = int(rng.choice(mdp.n_actions, p=probs / probs.sum()))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        done = bool(mdp.terminal[s2])
        traj.transitions.append(Transition(s, a, float(mdp.reward[s, a]), s2, done))
        if done:
            break
        s = s2
    return traj


class Simulator:
    """Fast stepping over a tabular MDP with an owned generator.

    Used by the trainer and demo generator, where per-step ``rng.choice``
    overhead would dominate.
    """

    def __init__(self, mdp: TabularMDP, max_episode_steps: int, rng: np.random.Generator):
        self.mdp = mdp
        self.max_episode_steps = max_episode_steps
        self.rng = rng
        self._cdf = np.cumsum(mdp.transition, axis=2)
        self._cdf[..., -1] = 1.0
        self._mu_cdf = np.cumsum(mdp.initial_dist)
        self._mu_cdf[-1] = 1.0
        self.state = -1
        self.t = 0

    def reset(self) -> int:
        self.state = int(np.searchsorted(self._mu_cdf, self.rng.random(), side="right"))
        self.t = 0
        return self.state

    def step(self, action: int) -> tuple[int, float, bool, bool]:
        """Returns ``(next_state, reward, done, truncated)``."""
        s = self.state
        r = float(self.mdp.reward[s, action])
        s2 = int(np.searchsorted(self._cdf[s, action], self.rng.random(), side="right"))
        done = bool(self.mdp.terminal[s2])
        self.t += 1
        truncated = not done and self.t >= self.max_episode_steps
        self.state = s2
        return s2, r, done, truncated


# Named fixtures -----------------------------------------------------------

# A snake maze: two wall rows leave one gap each, on alternating sides, so the
# shortest path from the corner start to the goal is 12 moves.
FIXTURE_GRID_5X5 = GridWorldSpec(
    width=5,
    height=5,
    goal=(4, 4),
    walls=frozenset({(0, 1), (1, 1), (2, 1), (3, 1), (1, 3), (2, 3), (3, 3), (4, 3)}),
    step_reward=-0.2,
    goal_reward=10.0,
    slip_prob=0.1,
    max_episode_steps=100,
    start=(0, 0),
)

FIXTURE_CORRIDOR = GridWorldSpec(width=2, height=1, goal=(1, 0), max_episode_steps=10)

FIXTURE_OPEN_5X5 = GridWorldSpec(
    width=5, height=5, goal=(4, 4), step_reward=-0.05, slip_prob=0.1, max_episode_steps=100
)

FIXTURES = {
    "grid5x5": FIXTURE_GRID_5X5,
    "open5x5": FIXTURE_OPEN_5X5,
    "corridor": FIXTURE_CORRIDOR,
}


def make_env(name: str) -> tuple[TabularMDP, int]:
    """Resolve a fixture name or MDP JSON path to ``(mdp, max_episode_steps)``.

    A JSON path may carry a ``#steps`` suffix for the time limit (default 100).
    """
    if name in FIXTURES:
        spec = FIXTURES[name]
        return build_gridworld(spec), spec.max_episode_steps
    if name.startswith("layered:"):
        L, W, A, seed = (int(v) for v in name.split(":", 1)[1].split(","))
        return build_layered_mdp(L, W, A, seed), L
    path, _, steps = name.partition("#")
    try:
        mdp = TabularMDP.load(path)
    except FileNotFoundError:
        raise ValueError(f"unknown environment {name!r}") from None
    return mdp, int(steps) if steps else 100
