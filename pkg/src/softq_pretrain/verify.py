"""Numerical checks of the soft-Q identities against exact oracles.

Every expectation here is exact: trajectory sums come from exhaustive
enumeration, values from linear solves, and derivatives either from
complex-step probes (machine precision) or central finite differences.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .losses import (
    DemoBatch,
    ReplayBatch,
    _alpha_detached,
    bc_grad,
    demo_policy_grad,
    demo_q_grad,
    dqfd_margin_grad,
    pretrain_grad,
    soft_q_grad,
    td_target,
)
from .mdp import FIXTURE_CORRIDOR, TabularMDP, build_gridworld, build_layered_mdp
from .models import GradAccumulator, MLPQ, QModel, TabularQ, finite_diff_grad
from .soft import entropy, exact_q_pi, exact_soft_policy_eval, soft_value, softmax_policy

CS_STEP = 1e-30


@dataclass
class CheckReport:
    name: str
    max_abs_error: float
    tolerance: float
    n_cases: int
    passed: bool = field(init=False)
    details: list = field(default_factory=list)
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.max_abs_error <= self.tolerance)

    def line(self) -> str:
        return f"{self.name} {'PASS' if self.passed else 'FAIL'} {self.max_abs_error:.3e} {self.tolerance:.0e}"

    def to_dict(self) -> dict:
        return asdict(self)


def _worst(details: list, k: int = 3) -> list:
    return sorted(details, key=lambda d: -d["error"])[:k]


# complex-safe soft quantities ---------------------------------------------

def _c_lse(q, epsilon):
    m = q.real.max(axis=-1, keepdims=True)
    return (m + epsilon * np.log(np.exp((q - m) / epsilon).sum(axis=-1, keepdims=True)))[..., 0]


def _c_log_pi(q, epsilon):
    return (q - _c_lse(q, epsilon)[..., None]) / epsilon


def _c_advantage(q, epsilon):
    log_pi = _c_log_pi(q, epsilon)
    pi = np.exp(log_pi)
    h = -np.sum(pi * log_pi, axis=-1)
    return q - (np.sum(pi * q, axis=-1) + epsilon * h)[..., None]


def complex_step_jacobian(model: QModel, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """``d fn(params) / d params`` by complex step; ``fn`` must be analytic in its input.

    Returns an array of shape ``fn(params).shape + (n_params,)``.
    """
    theta = model.get_params().astype(complex)
    out = np.asarray(fn(theta))
    jac = np.empty(out.shape + (theta.size,))
    for i in range(theta.size):
        probe = theta.copy()
        probe[i] += 1j * CS_STEP
        jac[..., i] = np.asarray(fn(probe)).imag / CS_STEP
    return jac


# trajectory enumeration ---------------------------------------------------

def enumerate_trajectories(mdp: TabularMDP, policy: np.ndarray, max_len: int = 50):
    """Yield ``(probability, [(s, a), ...])`` for every positive-probability episode.

    Episodes end on entering a terminal state; ``max_len`` guards against
    cyclic inputs.
    """
    P, mu, term = mdp.transition, mdp.initial_dist, mdp.terminal
    stack = [(float(mu[s]), s, []) for s in range(mdp.n_states) if mu[s] > 0]
    while stack:
        prob, s, path = stack.pop()
        if term[s]:
            yield prob, path
            continue
        if len(path) >= max_len:
            raise RuntimeError("episode exceeded max_len; is the MDP acyclic?")
        for a in range(mdp.n_actions):
            pa = prob * policy[s, a]
            if pa == 0.0:
                continue
            for s2 in np.flatnonzero(P[s, a]):
                stack.append((pa * P[s, a, s2], int(s2), path + [(s, a)]))


def trajectory_expectation(mdp: TabularMDP, policy: np.ndarray, f: np.ndarray) -> float:
    """``E[sum_t f(s_t, a_t)]`` over episodes of ``policy``; ``f`` is a ``(S, A)`` table."""
    total = 0.0
    for prob, path in enumerate_trajectories(mdp, policy):
        total += prob * sum(f[s, a] for s, a in path)
    return total


def _random_policy(rng, S, A):
    return rng.dirichlet(np.ones(A), size=S)


# expert-gap identities ------------------------------------------------

def expert_gap_errors(mdp: TabularMDP, pi: np.ndarray, pi_star: np.ndarray, epsilon: float) -> tuple[float, float]:
    """Signed discrepancies of the two expert-gap identities for one case.

    Values come from linear solves; every expectation from enumeration.
    """
    S, A = mdp.n_states, mdp.n_actions
    live = ~mdp.terminal
    q_pi = exact_q_pi(mdp, pi, epsilon, 1.0)
    h_pi = np.where(live, entropy(pi), 0.0)
    h_star = np.where(live, entropy(pi_star), 0.0)
    v_pi = np.sum(pi * q_pi, axis=1) + epsilon * h_pi
    adv = q_pi - v_pi[:, None]
    eta_pi = exact_soft_policy_eval(mdp, pi, epsilon, 1.0).eta
    eta_star = exact_soft_policy_eval(mdp, pi_star, epsilon, 1.0).eta

    per_action = lambda v: np.repeat(v[:, None], A, axis=1)
    e_star_adv_h = trajectory_expectation(mdp, pi_star, adv + epsilon * per_action(h_star))
    err1 = eta_pi - (eta_star - e_star_adv_h)

    r_pi = trajectory_expectation(mdp, pi, mdp.reward)
    r_star = trajectory_expectation(mdp, pi_star, mdp.reward)
    e_star_adv = trajectory_expectation(mdp, pi_star, adv)
    e_pi_h = trajectory_expectation(mdp, pi, epsilon * per_action(h_pi))
    err2 = r_pi - (r_star - (e_star_adv + e_pi_h))
    return float(err1), float(err2)


def check_expert_gap(n_mdps: int = 60, seed: int = 0, epsilon: float = 0.3, tol: float = 1e-8) -> CheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    details, signed = [], []
    for i in range(n_mdps):
        L, W, A = (int(x) for x in rng.integers(1, 4, size=3))
        mdp = build_layered_mdp(L, W, A, int(rng.integers(2**31)))
        pi = _random_policy(rng, mdp.n_states, A)
        pi_star = _random_policy(rng, mdp.n_states, A)
        e1, e2 = expert_gap_errors(mdp, pi, pi_star, epsilon)
        signed += [e1, e2]
        details.append({"case": i, "layers": L, "width": W, "actions": A, "error": max(abs(e1), abs(e2))})
    err = max(d["error"] for d in details)
    out = _worst(details) + [{"signed_mean": float(np.mean(signed))}]
    return CheckReport("expert_gap", err, tol, n_mdps, out, seconds=time.perf_counter() - t0)


# soft-Q gradient decomposition ---------------------------------------------

def default_v_target(y_bar: np.ndarray, pi: np.ndarray, h: np.ndarray, epsilon: float) -> np.ndarray:
    """``E_{a ~ pi}[y] + epsilon * H(pi)`` per state."""
    return np.sum(pi * y_bar, axis=1) + epsilon * h


def soft_q_decomposition_sides(
    mdp: TabularMDP,
    model: TabularQ,
    target: np.ndarray,
    epsilon: float,
    gamma: float,
    state_dist: np.ndarray,
    v_target: Callable = default_v_target,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact-expectation soft-Q semi-gradient and its policy-gradient + value split.

    Left: ``E_{s~d, a~pi}[(Q - y) grad Q]`` with ``y = r + gamma E[V_tgt(s')]``.
    Right: ``E_s[-epsilon g + (V - V_target) grad V]`` where
    ``g = E_a[grad log pi (y - Q)]``. Jacobians come from complex steps.
    """
    states = np.arange(mdp.n_states)
    live = ~mdp.terminal
    q = model.forward(states)
    pi = softmax_policy(q, epsilon)
    h = entropy(pi)
    v_next = np.where(mdp.terminal, 0.0, soft_value(model.forward(states, target), epsilon))
    y_bar = mdp.reward + gamma * mdp.transition @ v_next

    jq = complex_step_jacobian(model, lambda p: model.forward(states, p))
    jv = complex_step_jacobian(model, lambda p: _c_lse(model.forward(states, p), epsilon))
    jlog = complex_step_jacobian(model, lambda p: _c_log_pi(model.forward(states, p), epsilon))

    w = state_dist * live
    lhs = np.einsum("s,sa,sap->p", w, pi * (q - y_bar), jq)
    g = np.einsum("sa,sap->sp", pi * (y_bar - q), jlog)
    v = soft_value(q, epsilon)
    rhs = np.einsum("s,sp->p", w, -epsilon * g + (v - v_target(y_bar, pi, h, epsilon))[:, None] * jv)
    return lhs, rhs


def decomposition_fixture() -> TabularMDP:
    return build_gridworld(FIXTURE_CORRIDOR)


def check_soft_q_decomposition(
    mdp: TabularMDP | None = None,
    n_param_draws: int = 20,
    seed: int = 0,
    epsilon: float = 0.2,
    gamma: float = 0.9,
    v_target: Callable = default_v_target,
    tol: float = 1e-6,
) -> CheckReport:
    t0 = time.perf_counter()
    mdp = decomposition_fixture() if mdp is None else mdp
    rng = np.random.default_rng(seed)
    model = TabularQ(mdp.n_states, mdp.n_actions)
    details = []
    for i in range(n_param_draws):
        model.set_params(rng.normal(0.0, 1.0, model.n_params))
        # odd draws use a separate target network, even draws the live one
        target = model.get_params() if i % 2 == 0 else rng.normal(0.0, 1.0, model.n_params)
        d = rng.dirichlet(np.ones(mdp.n_states))
        lhs, rhs = soft_q_decomposition_sides(mdp, model, target, epsilon, gamma, d, v_target)
        details.append({"case": i, "error": float(np.max(np.abs(lhs - rhs)))})
    err = max(x["error"] for x in details)
    return CheckReport("soft_q_decomposition", err, tol, n_param_draws, _worst(details), seconds=time.perf_counter() - t0)


# behavior-cloning equivalence ---------------------------------------------

def bc_equivalence_error(model: QModel, state, action: int, epsilon: float) -> float:
    """``| grad A(s, a) - epsilon grad log pi(a|s) |_inf`` with nothing detached.

    The advantage side is complex-stepped; the log-policy side is backprop
    of the cross-entropy adjoint.
    """
    s = np.asarray([state])
    ja = complex_step_jacobian(model, lambda p: _c_advantage(model.forward(s, p), epsilon)[0, action])
    acc = GradAccumulator.like(model)
    bc_grad(model, DemoBatch(s, np.asarray([action])), epsilon, acc)
    return float(np.max(np.abs(ja - (-acc.grad))))


def _random_model(rng, kind: str, S: int, A: int, scale: float = 1.0) -> QModel:
    if kind == "tabular":
        m = TabularQ(S, A)
        m.set_params(rng.normal(0.0, scale, m.n_params))
    else:
        m = MLPQ(S, A, hidden=int(rng.integers(2, 9)), seed=int(rng.integers(2**31)))
        m.set_params(m.get_params() * scale + rng.normal(0.0, 0.1, m.n_params))
    return m


def check_bc_equivalence(n_cases: int = 120, seed: int = 0, tol: float = 1e-8) -> CheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    details = []
    for i in range(n_cases):
        kind = "tabular" if i % 2 == 0 else "mlp"
        S, A = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        model = _random_model(rng, kind, S, A, scale=float(rng.uniform(0.1, 3.0)))
        eps = float(rng.uniform(0.05, 2.0))
        err = bc_equivalence_error(model, int(rng.integers(S)), int(rng.integers(A)), eps)
        details.append({"case": i, "kind": kind, "error": err})
    err = max(x["error"] for x in details)
    return CheckReport("bc_equivalence", err, tol, n_cases, _worst(details), seconds=time.perf_counter() - t0)


# IRL form of the Q-side gradient ------------------------------------------

def gq_irl_error(model: QModel, state, epsilon: float) -> float:
    """``grad [epsilon logsumexp(Q / epsilon)]`` versus ``sum_a pi(a) grad Q(s, a)``."""
    s = np.asarray([state])
    jv = complex_step_jacobian(model, lambda p: _c_lse(model.forward(s, p), epsilon)[0])
    pi = softmax_policy(model.forward(s), epsilon)
    acc = GradAccumulator.like(model)
    model.backward(s, pi, acc)
    return float(np.max(np.abs(jv - acc.grad)))


def check_gq_irl_form(n_cases: int = 100, seed: int = 0, tol_tabular: float = 1e-10, tol_mlp: float = 1e-8) -> CheckReport:
    """Reported error is the worst ratio error / tolerance times ``tol_mlp``.

    That keeps a single scalar against a single tolerance while holding each
    model kind to its own bound.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    details = []
    for i in range(n_cases):
        kind = "tabular" if i % 2 == 0 else "mlp"
        S, A = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        model = _random_model(rng, kind, S, A, scale=float(rng.uniform(0.1, 3.0)))
        err = gq_irl_error(model, int(rng.integers(S)), float(rng.uniform(0.05, 2.0)))
        tol = tol_tabular if kind == "tabular" else tol_mlp
        details.append({"case": i, "kind": kind, "raw_error": err, "tolerance": tol, "error": err / tol * tol_mlp})
    err = max(x["error"] for x in details)
    return CheckReport("gq_irl_form", err, tol_mlp, n_cases, _worst(details), seconds=time.perf_counter() - t0)


# finite-difference audit of every training gradient -------------------------

def relative_error(g: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    """``|g - fd|_inf / max(|g|_inf, |fd|_inf, floor)``."""
    scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd)) / scale)


def _fd_fixture(rng, kind: str, S: int = 4, A: int = 3, n: int = 6):
    model = _random_model(rng, kind, S, A)
    target = _random_model(rng, kind, S, A)
    if kind == "mlp":
        target = model.clone()
        target.set_params(model.get_params() + rng.normal(0.0, 0.1, model.n_params))
    replay = ReplayBatch(
        rng.integers(0, S, n), rng.integers(0, A, n), rng.normal(size=n), rng.integers(0, S, n), rng.random(n) < 0.3
    )
    demo = DemoBatch(rng.integers(0, S, n), rng.integers(0, A, n))
    return model, target, replay, demo


def _losses_for_fd(model, target, replay, demo, epsilon, gamma, margin, lam):
    """``name -> (analytic(acc), scalar loss(params))`` pairs honoring each stop-gradient."""
    theta0 = model.get_params()
    idx_r, idx_d = np.arange(len(replay)), np.arange(len(demo))
    y = td_target(replay.rewards, replay.dones, target.forward(replay.next_states), epsilon, gamma)

    def td(p):
        return 0.5 * np.mean((model.forward(replay.states, p)[idx_r, replay.actions] - y) ** 2)

    def l_pi(p):
        q = model.forward(demo.states, p)
        q_bar = model.forward(demo.states, theta0)
        pi = softmax_policy(q, epsilon)
        adv = q_bar[idx_d, demo.actions] - np.sum(pi * q_bar, axis=1) - epsilon * entropy(pi)
        h_r = entropy(softmax_policy(model.forward(replay.states, p), epsilon))
        return np.mean(adv) + epsilon * np.mean(h_r)

    def l_q(p):
        saved = model.get_params()
        model.set_params(p)
        try:
            alpha, _ = _alpha_detached(model, demo, replay, epsilon, theta0)
        finally:
            model.set_params(saved)
        return max(-alpha, 0.0)

    def bc(p):
        q = model.forward(demo.states, p)
        log_pi = (q - soft_value(q, epsilon)[:, None]) / epsilon
        return -epsilon * np.mean(log_pi[idx_d, demo.actions])

    def hinge(p):
        q = model.forward(demo.states, p)
        bonus = np.full_like(q, margin)
        bonus[idx_d, demo.actions] = 0.0
        return np.mean(np.max(q + bonus, axis=1) - q[idx_d, demo.actions])

    return {
        "soft_q": (lambda acc: soft_q_grad(model, target, replay, epsilon, gamma, acc), td),
        "demo_policy": (lambda acc: demo_policy_grad(model, demo, replay, epsilon, acc), l_pi),
        "demo_q": (lambda acc: demo_q_grad(model, demo, replay, epsilon, acc), l_q),
        "bc": (lambda acc: bc_grad(model, demo, epsilon, acc), bc),
        "dqfd": (lambda acc: dqfd_margin_grad(model, target, demo, replay, margin, epsilon, gamma, acc), lambda p: td(p) + hinge(p)),
        "pretrain": (
            lambda acc: pretrain_grad(model, target, replay, demo, epsilon, gamma, lam, acc),
            lambda p: td(p) + lam * (epsilon * l_pi(p) + l_q(p)),
        ),
    }


def _alpha(model, demo, replay, epsilon):
    return _alpha_detached(model, demo, replay, epsilon, model.get_params())[0]


def _gate_fixture(rng, kind, epsilon, want_open: bool, tries: int = 200):
    """A fixture whose gate is clearly open (alpha < 0) or closed, away from the kink."""
    for _ in range(tries):
        fx = _fd_fixture(rng, kind)
        a = _alpha(fx[0], fx[3], fx[2], epsilon)
        if (a < -1e-3) if want_open else (a > 1e-3):
            return fx
    raise RuntimeError("could not draw a fixture with the requested gate state")


def _margin_is_clear(model, demo, margin, gap=1e-4) -> bool:
    q = model.forward(demo.states)
    bonus = np.full_like(q, margin)
    bonus[np.arange(len(demo)), demo.actions] = 0.0
    top2 = np.sort(q + bonus, axis=1)[:, -2:]
    return bool(np.all(top2[:, 1] - top2[:, 0] > gap))


def check_all_gradients_fd(
    seed: int = 0,
    epsilon: float = 0.5,
    gamma: float = 0.9,
    margin: float = 0.8,
    lam: float = 0.7,
    tol: float = 1e-5,
    tol_tabular: float = 1e-6,
    h: float = 1e-5,
) -> CheckReport:
    """Every training gradient against central differences, both model kinds."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    details = []
    for kind in ("tabular", "mlp"):
        bound = tol_tabular if kind == "tabular" else tol
        for gate in ("open", "closed"):
            fx = _gate_fixture(rng, kind, epsilon, want_open=gate == "open")
            while not _margin_is_clear(fx[0], fx[3], margin):
                fx = _gate_fixture(rng, kind, epsilon, want_open=gate == "open")
            pairs = _losses_for_fd(*fx, epsilon, gamma, margin, lam)
            for name, (analytic, loss_fn) in pairs.items():
                if gate == "closed" and name not in ("demo_q", "pretrain"):
                    continue
                acc = GradAccumulator.like(fx[0])
                analytic(acc)
                fd = finite_diff_grad(fx[0], loss_fn, h)
                err = relative_error(acc.grad, fd)
                label = f"{name}[{kind},gate-{gate}]" if name in ("demo_q", "pretrain") else f"{name}[{kind}]"
                details.append({"case": label, "raw_error": err, "tolerance": bound, "error": err / bound * tol})
    err = max(x["error"] for x in details)
    return CheckReport("gradients_fd", err, tol, len(details), _worst(details, 5), seconds=time.perf_counter() - t0)


def run_all(seed: int = 0) -> list[CheckReport]:
    return [
        check_expert_gap(seed=seed),
        check_soft_q_decomposition(seed=seed),
        check_bc_equivalence(seed=seed),
        check_gq_irl_form(seed=seed),
        check_all_gradients_fd(seed=seed),
    ]
