"""Training gradients for soft Q-learning with reward-free demonstrations.

Sign convention: every function accumulates the gradient of a quantity that
training *minimizes*, so an optimizer always steps along ``-acc.grad``:

* ``soft_q_grad``       grad of the TD loss (targets held fixed)
* ``demo_policy_grad``  grad of ``L_pi`` with Q detached, i.e. ``-g_pi``
* ``demo_q_grad``       grad of ``L_Q`` with pi detached, i.e. ``-g_Q``
* ``bc_grad``           grad of ``-epsilon * mean log pi(a*|s*)``
* ``dqfd_margin_grad``  grad of the large-margin hinge plus the TD loss

Minibatch losses are per-step means. Detached factors are evaluated from a
frozen parameter vector (``frozen``), defaulting to the current parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import GradAccumulator, QModel
from .soft import advantage, entropy, soft_value, softmax_policy


@dataclass
class ReplayBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


@dataclass
class DemoBatch:
    states: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.actions)


@dataclass
class LossReport:
    soft_q_loss: float = 0.0
    l_pi: float = 0.0
    l_q: float = 0.0
    alpha_hat: float = 0.0
    gate_active: bool = False
    entropy_mean: float = 0.0
    y_mean: float = 0.0
    delta_v_mean: float = 0.0
    margin_loss: float = 0.0
    bc_loss: float = 0.0


def _log_softmax(q: np.ndarray, epsilon: float) -> np.ndarray:
    return (q - np.asarray(soft_value(q, epsilon))[..., None]) / epsilon


def _entropy_adjoint(pi: np.ndarray, log_pi: np.ndarray, epsilon: float) -> np.ndarray:
    """d H(softmax(q / epsilon)) / d q, row-wise."""
    h = -np.sum(pi * log_pi, axis=-1, keepdims=True)
    return -pi * (log_pi + h) / epsilon


def td_target(r, done, q_next_target, epsilon: float, gamma: float):
    """``r`` at episode end, else ``r + gamma * epsilon * logsumexp(q_next / epsilon)``."""
    v = soft_value(q_next_target, epsilon)
    y = np.where(done, r, r + gamma * np.where(done, 0.0, v))
    return y if np.ndim(y) else float(y)


def soft_q_grad(model: QModel, target_model: QModel, batch: ReplayBatch, epsilon: float, gamma: float, acc: GradAccumulator) -> LossReport:
    n = len(batch)
    q_next = target_model.forward(batch.next_states)
    y = td_target(batch.rewards, batch.dones, q_next, epsilon, gamma)
    q = model.forward(batch.states)
    idx = np.arange(n)
    delta = q[idx, batch.actions] - y
    adj = np.zeros_like(q)
    adj[idx, batch.actions] = delta / n
    model.backward(batch.states, adj, acc)
    acc.count += n
    pi = softmax_policy(q, epsilon)
    return LossReport(
        soft_q_loss=float(0.5 * np.mean(delta**2)),
        y_mean=float(np.mean(y)),
        entropy_mean=float(np.mean(entropy(pi))),
    )


def demo_policy_grad(model: QModel, demo: DemoBatch, replay: ReplayBatch, epsilon: float, acc: GradAccumulator, frozen: np.ndarray | None = None) -> float:
    """Accumulate ``grad L_pi`` with every Q factor detached; return ``L_pi``.

    ``L_pi = mean_demo A(s*, a*) + epsilon * mean_replay H(pi(.|s))``. The
    expectation over ``a' ~ pi`` is taken exactly over the action set.
    """
    nd, nr = len(demo), len(replay)
    q = model.forward(demo.states)
    q_bar = q if frozen is None else model.forward(demo.states, frozen)
    pi = softmax_policy(q, epsilon)
    log_pi = _log_softmax(q, epsilon)
    h = -np.sum(pi * log_pi, axis=1)
    exp_q_bar = np.sum(pi * q_bar, axis=1)
    idx = np.arange(nd)
    adv = q_bar[idx, demo.actions] - exp_q_bar - epsilon * h

    # d/dq of -(E_pi q_bar) - epsilon H(pi), with q_bar constant
    adj_demo = -pi * (q_bar - exp_q_bar[:, None]) / epsilon - epsilon * _entropy_adjoint(pi, log_pi, epsilon)
    model.backward(demo.states, adj_demo / nd, acc)

    q_r = model.forward(replay.states)
    pi_r = softmax_policy(q_r, epsilon)
    log_pi_r = _log_softmax(q_r, epsilon)
    h_r = -np.sum(pi_r * log_pi_r, axis=1)
    model.backward(replay.states, epsilon * _entropy_adjoint(pi_r, log_pi_r, epsilon) / nr, acc)
    acc.count += nd + nr
    return float(np.mean(adv) + epsilon * np.mean(h_r))


def alpha_hat(model: QModel, demo: DemoBatch, replay: ReplayBatch, epsilon: float) -> float:
    """Minibatch estimate of ``E_demo[A(s*, a*)] + epsilon E_replay[H(pi)]``.

    Positive means the current Q already rates the expert above the agent.
    """
    q = model.forward(demo.states)
    pi = softmax_policy(q, epsilon)
    adv = advantage(q, pi, epsilon)[np.arange(len(demo)), demo.actions]
    h_r = entropy(softmax_policy(model.forward(replay.states), epsilon))
    return float(np.mean(adv) + epsilon * np.mean(h_r))


def _alpha_detached(model, demo, replay, epsilon, frozen):
    """``alpha`` as a function of live Q with pi taken from ``frozen``."""
    q = model.forward(demo.states)
    q_bar = q if frozen is None else model.forward(demo.states, frozen)
    pi_bar = softmax_policy(q_bar, epsilon)
    q_r_bar = model.forward(replay.states, frozen)
    h_r = entropy(softmax_policy(q_r_bar, epsilon))
    idx = np.arange(len(demo))
    inner = q[idx, demo.actions] - np.sum(pi_bar * q, axis=1) - epsilon * entropy(pi_bar)
    return float(np.mean(inner) + epsilon * np.mean(h_r)), pi_bar


def _demo_q(model, demo, replay, epsilon, acc, frozen=None) -> tuple[float, float]:
    alpha, pi_bar = _alpha_detached(model, demo, replay, epsilon, frozen)
    if alpha >= 0.0:
        return 0.0, alpha
    n = len(demo)
    adj = pi_bar.copy()
    adj[np.arange(n), demo.actions] -= 1.0
    model.backward(demo.states, adj / n, acc)
    acc.count += n
    return -alpha, alpha


def demo_q_grad(model: QModel, demo: DemoBatch, replay: ReplayBatch, epsilon: float, acc: GradAccumulator, frozen: np.ndarray | None = None) -> float:
    """Accumulate ``grad L_Q`` with pi detached; return ``L_Q = [-alpha]_+``.

    Nothing is accumulated while ``alpha >= 0`` (the hinge has zero
    gradient at its kink).
    """
    return _demo_q(model, demo, replay, epsilon, acc, frozen)[0]


def pretrain_grad(
    model: QModel,
    target_model: QModel,
    replay: ReplayBatch,
    demo: DemoBatch,
    epsilon: float,
    gamma: float,
    lam: float,
    acc: GradAccumulator,
) -> LossReport:
    """TD gradient on ``replay`` plus ``lam * (epsilon * grad L_pi + grad L_Q)``."""
    report = soft_q_grad(model, target_model, replay, epsilon, gamma, acc)
    acc_pi = GradAccumulator.like(model)
    acc_q = GradAccumulator.like(model)
    report.l_pi = demo_policy_grad(model, demo, replay, epsilon, acc_pi)
    report.l_q, report.alpha_hat = _demo_q(model, demo, replay, epsilon, acc_q)
    report.gate_active = report.alpha_hat < 0.0
    if lam != 0.0:
        acc.grad += lam * (epsilon * acc_pi.grad + acc_q.grad)
        acc.count += acc_pi.count + acc_q.count
    return report


def bc_grad(model: QModel, demo: DemoBatch, epsilon: float, acc: GradAccumulator) -> float:
    """Accumulate the gradient of ``-epsilon * mean log pi(a*|s*)``; return the cross-entropy."""
    n = len(demo)
    q = model.forward(demo.states)
    pi = softmax_policy(q, epsilon)
    idx = np.arange(n)
    adj = pi.copy()
    adj[idx, demo.actions] -= 1.0
    model.backward(demo.states, adj / n, acc)
    acc.count += n
    return float(-np.mean(_log_softmax(q, epsilon)[idx, demo.actions]))


def margin_grad(model: QModel, demo: DemoBatch, margin: float, acc: GradAccumulator) -> float:
    """Large-margin hinge ``max_a (Q(s*,a) + margin [a != a*]) - Q(s*,a*)``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    n = len(demo)
    q = model.forward(demo.states)
    idx = np.arange(n)
    bonus = np.full_like(q, margin)
    bonus[idx, demo.actions] = 0.0
    top = np.argmax(q + bonus, axis=1)
    loss = (q + bonus)[idx, top] - q[idx, demo.actions]
    adj = np.zeros_like(q)
    adj[idx, top] += 1.0
    adj[idx, demo.actions] -= 1.0
    model.backward(demo.states, adj / n, acc)
    acc.count += n
    return float(np.mean(loss))


def dqfd_margin_grad(
    model: QModel,
    target_model: QModel,
    demo: DemoBatch,
    replay: ReplayBatch,
    margin: float,
    epsilon: float,
    gamma: float,
    acc: GradAccumulator,
) -> float:
    """Margin hinge on ``demo`` plus the TD gradient on ``replay``; returns the hinge value."""
    soft_q_grad(model, target_model, replay, epsilon, gamma, acc)
    return margin_grad(model, demo, margin, acc)
