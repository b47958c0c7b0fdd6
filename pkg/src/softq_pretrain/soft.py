"""Entropy-regularized quantities and exact tabular oracles.

All vector functions act on the last axis, so they accept a single action
vector ``(A,)`` or a stack ``(..., A)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMDP


class NotConvergedError(RuntimeError):
    pass


def _check_q(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("action values must be finite")
    return q


def softmax_policy(q, epsilon: float) -> np.ndarray:
    """``softmax(q / epsilon)`` along the last axis."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    q = _check_q(q)
    z = (q - q.max(axis=-1, keepdims=True)) / epsilon
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_value(q, epsilon: float) -> np.ndarray | float:
    """``epsilon * logsumexp(q / epsilon)``; lies in ``[max q, max q + epsilon ln A]``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    q = _check_q(q)
    m = q.max(axis=-1)
    v = m + epsilon * np.log(np.exp((q - m[..., None]) / epsilon).sum(axis=-1))
    return v if v.ndim else float(v)


def entropy(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(p * np.log(safe), axis=-1)
    # -0.0 and rounding below zero at one-hot inputs
    h = np.maximum(h, 0.0)
    return h if h.ndim else float(h)


def advantage(q, pi, epsilon: float) -> np.ndarray:
    """``A = q - E_pi[q] - epsilon * H(pi)``, so that ``E_pi[A] = -epsilon H(pi)``."""
    q = np.asarray(q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if q.shape != pi.shape:
        raise ValueError("q and pi must have the same shape")
    base = np.sum(pi * q, axis=-1) + epsilon * entropy(pi)
    return q - np.asarray(base)[..., None]


def _check_gamma(mdp: TabularMDP, gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")


def soft_value_iteration(
    mdp: TabularMDP,
    epsilon: float,
    gamma: float,
    tol: float = 1e-10,
    max_iters: int = 100_000,
) -> tuple[np.ndarray, int]:
    """Iterate the soft Bellman backup to a fixed point.

    Returns ``(q_star, iterations)``; terminal rows are zero. With
    ``gamma == 1`` the MDP must be acyclic (every policy terminates).
    """
    _check_gamma(mdp, gamma)
    if gamma == 1.0 and not mdp.is_acyclic():
        raise ValueError("gamma = 1 requires an MDP on which every policy terminates")
    live = ~mdp.terminal
    P, R = mdp.transition, mdp.reward
    q = np.zeros_like(R)
    for it in range(1, max_iters + 1):
        v = np.where(live, soft_value(q, epsilon), 0.0)
        new = np.where(live[:, None], R + gamma * P @ v, 0.0)
        residual = np.max(np.abs(new - q))
        q = new
        if residual <= tol:
            return q, it
    raise NotConvergedError(f"soft value iteration residual {residual:.3e} > {tol:.1e} after {max_iters} iterations")


def bellman_residual(mdp: TabularMDP, q: np.ndarray, epsilon: float, gamma: float) -> float:
    live = ~mdp.terminal
    v = np.where(live, soft_value(q, epsilon), 0.0)
    target = np.where(live[:, None], mdp.reward + gamma * mdp.transition @ v, 0.0)
    return float(np.max(np.abs(target - q)))


@dataclass
class EvalReport:
    eta: float
    return_only: float
    per_state_values: np.ndarray
    gamma: float

    @property
    def horizon_or_gamma(self) -> tuple[str, float]:
        return ("undiscounted", 1.0) if self.gamma == 1.0 else ("discounted", self.gamma)


def _solve_values(mdp: TabularMDP, policy: np.ndarray, bonus: np.ndarray, gamma: float) -> np.ndarray:
    """Solve ``V = r_pi + bonus + gamma P_pi V`` on non-terminal states."""
    live = np.flatnonzero(~mdp.terminal)
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.sum(policy * mdp.reward, axis=1) + bonus
    M = np.eye(len(live)) - gamma * P_pi[np.ix_(live, live)]
    if gamma == 1.0:
        # an improper policy makes the undiscounted system singular
        if np.max(np.abs(np.linalg.eigvals(P_pi[np.ix_(live, live)]))) >= 1.0 - 1e-12:
            raise np.linalg.LinAlgError("policy does not terminate with probability 1; undiscounted evaluation is undefined")
    v = np.zeros(mdp.n_states)
    v[live] = np.linalg.solve(M, r_pi[live])
    return v


def _check_policy(mdp: TabularMDP, policy) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
    live = ~mdp.terminal
    if np.any(policy[live] < 0) or np.max(np.abs(policy[live].sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("policy rows must be probability vectors")
    return policy


def exact_soft_policy_eval(mdp: TabularMDP, policy, epsilon: float, gamma: float) -> EvalReport:
    """Exact entropy-regularized evaluation of a fixed policy.

    The entropy bonus is collected at every visited non-terminal state,
    starting with the initial one. ``return_only`` is the same evaluation
    with the bonus removed.
    """
    _check_gamma(mdp, gamma)
    policy = _check_policy(mdp, policy)
    h = np.where(mdp.terminal, 0.0, entropy(policy))
    v = _solve_values(mdp, policy, epsilon * h, gamma)
    v0 = _solve_values(mdp, policy, np.zeros(mdp.n_states), gamma)
    return EvalReport(
        eta=float(mdp.initial_dist @ v),
        return_only=float(mdp.initial_dist @ v0),
        per_state_values=v,
        gamma=gamma,
    )


def exact_q_pi(mdp: TabularMDP, policy, epsilon: float, gamma: float) -> np.ndarray:
    """``Q(s, a) = r(s, a) + gamma E[V(s')]``; the entropy bonus enters from the next state."""
    report = exact_soft_policy_eval(mdp, policy, epsilon, gamma)
    q = mdp.reward + gamma * mdp.transition @ report.per_state_values
    q[mdp.terminal] = 0.0
    return q


def uniform_policy(mdp: TabularMDP) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
