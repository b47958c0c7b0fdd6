"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
"""
import dataclasses
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from softq_pretrain.data import generate_demos
from softq_pretrain.losses import DemoBatch, ReplayBatch, pretrain_grad, soft_q_grad
from softq_pretrain.mdp import build_layered_mdp, make_env
from softq_pretrain.models import GradAccumulator, make_model
from softq_pretrain.soft import bellman_residual, entropy, exact_soft_policy_eval, soft_value_iteration, softmax_policy
from softq_pretrain.trainer import load_config, train
from softq_pretrain.verify import check_all_gradients_fd, check_bc_equivalence, check_gq_irl_form
from softq_pretrain.verify import check_soft_q_decomposition, check_expert_gap

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance_grid5x5.yaml"
SEEDS = range(10)
ALGORITHMS = ("ours", "soft_q", "bc")

pytestmark = pytest.mark.slow


def report(n, ok, text):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'} {text}"
    print(line)
    return line


@pytest.fixture
def emit(capsys):
    def _emit(n, ok, text):
        with capsys.disabled():
            print()
            report(n, ok, text)
        assert ok, text
    return _emit


# criterion 1 and 2 -----------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    reps = [check_expert_gap(n_mdps=60), check_soft_q_decomposition(n_param_draws=20),
            check_bc_equivalence(n_cases=120), check_gq_irl_form(n_cases=100)]
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in reps) and reps[0].n_cases >= 50 and reps[1].n_cases >= 20 and reps[2].n_cases >= 100
    ok = ok and secs < 60
    return ok, "; ".join(r.line() for r in reps) + f"; {secs:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    r = check_all_gradients_fd(tol=1e-5, tol_tabular=1e-6)
    secs = time.perf_counter() - t0
    return r.passed and secs < 120, f"{r.line()} over {r.n_cases} cases; {secs:.1f}s"


# criterion 3 -----------------------------------------------------------------

def backward_induction(mdp, eps):
    """Soft optimal values of an acyclic MDP, one state at a time in reverse topological order."""
    S, A = mdp.n_states, mdp.n_actions
    succ = [set(np.flatnonzero(mdp.transition[s].sum(axis=0))) - {s} for s in range(S)]
    v = [None] * S
    for s in np.flatnonzero(mdp.terminal):
        v[s] = 0.0
    q = np.zeros((S, A))
    while any(x is None for x in v):
        for s in range(S):
            if v[s] is None and all(v[t] is not None for t in succ[s]):
                for a in range(A):
                    q[s, a] = mdp.reward[s, a] + sum(mdp.transition[s, a, t] * v[t] for t in succ[s])
                top = max(q[s])
                v[s] = top + eps * math.log(sum(math.exp((x - top) / eps) for x in q[s]))
    return q


def enumerate_eta(mdp, pi, eps, depth):
    """Entropy-regularized return summed over every trajectory up to ``depth`` decisions."""
    h = [0.0 if mdp.terminal[s] else -sum(p * math.log(p) for p in pi[s] if p > 0) for s in range(mdp.n_states)]
    total = 0.0
    frontier = {s: p for s, p in enumerate(mdp.initial_dist) if p > 0}
    for _ in range(depth):
        nxt = {}
        for s, p in frontier.items():
            if mdp.terminal[s]:
                continue
            total += p * eps * h[s]
            for a in range(mdp.n_actions):
                if pi[s, a] == 0:
                    continue
                total += p * pi[s, a] * mdp.reward[s, a]
                for t in np.flatnonzero(mdp.transition[s, a]):
                    nxt[t] = nxt.get(t, 0.0) + p * pi[s, a] * mdp.transition[s, a, t]
        frontier = nxt
    return total


def criterion_3():
    rng = np.random.default_rng(0)
    resid, induct, enum = 0.0, 0.0, 0.0
    for name in ("grid5x5", "open5x5", "corridor"):
        mdp, _ = make_env(name)
        for eps, gamma in ((0.1, 0.97), (0.5, 0.9)):
            q, _ = soft_value_iteration(mdp, eps, gamma)
            resid = max(resid, bellman_residual(mdp, q, eps, gamma))
    for L, W, A in itertools.product((1, 2, 3), (1, 2), (1, 2, 3)):
        mdp = build_layered_mdp(L, W, A, int(rng.integers(2**31)))
        for eps in (0.1, 1.0):
            q, _ = soft_value_iteration(mdp, eps, 1.0)
            resid = max(resid, bellman_residual(mdp, q, eps, 1.0))
            induct = max(induct, float(np.max(np.abs(q - backward_induction(mdp, eps)))))
            pi = rng.dirichlet(np.ones(A), size=mdp.n_states)
            eta = exact_soft_policy_eval(mdp, pi, eps, 1.0).eta
            enum = max(enum, abs(eta - enumerate_eta(mdp, pi, eps, L + 1)))
    # the corridor is cyclic; a strongly goal-seeking policy makes truncation negligible
    corridor, _ = make_env("corridor")
    pi = np.tile([0.03, 0.91, 0.03, 0.03], (corridor.n_states, 1))
    eta = exact_soft_policy_eval(corridor, pi, 0.3, 1.0).eta
    enum = max(enum, abs(eta - enumerate_eta(corridor, pi, 0.3, 400)))
    ok = resid <= 1e-9 and induct <= 1e-10 and enum <= 1e-10
    return ok, f"bellman residual {resid:.1e} (1e-9), induction {induct:.1e} (1e-10), enumeration {enum:.1e} (1e-10)"


# criterion 7 -----------------------------------------------------------------

def criterion_7(cfg, demos):
    a = train(dataclasses.replace(cfg, algorithm="ours", pretrain_steps=0, max_timesteps=6000, seed=3), demos=demos)
    b = train(dataclasses.replace(cfg, algorithm="soft_q", pretrain_steps=0, max_timesteps=6000, seed=3), demos=demos)
    same_run = np.array_equal(a.model.params, b.model.params) and [repr(r) for r in a.metrics] == [repr(r) for r in b.metrics]
    rng = np.random.default_rng(1)
    same_grad = True
    for kind in ("tabular", "mlp"):
        model, target = make_model(kind, 6, 3, hidden=8, seed=1), make_model(kind, 6, 3, hidden=8, seed=2)
        if kind == "tabular":
            model.set_params(rng.normal(size=model.n_params))
            target.set_params(rng.normal(size=target.n_params))
        replay = ReplayBatch(rng.integers(0, 6, 32), rng.integers(0, 3, 32), rng.normal(size=32), rng.integers(0, 6, 32), rng.random(32) < 0.2)
        demo = DemoBatch(rng.integers(0, 6, 32), rng.integers(0, 3, 32))
        g0, g1 = GradAccumulator.like(model), GradAccumulator.like(model)
        soft_q_grad(model, target, replay, 0.1, 0.97, g0)
        pretrain_grad(model, target, replay, demo, 0.1, 0.97, 0.0, g1)
        same_grad = same_grad and np.array_equal(g0.grad, g1.grad)
    return same_run and same_grad, f"N_p=0 run bitwise equal: {same_run}; lambda=0 gradient bitwise equal: {same_grad}"


# criteria 4, 5, 6, 8 share one batch of runs ------------------------------------

@dataclasses.dataclass
class Study:
    cfg: object
    optimal_return: float
    demo_return: float
    runs: dict
    seconds: float


def run_study():
    cfg = load_config(CONFIG)
    mdp, steps = make_env(cfg.env)
    q_star, _ = soft_value_iteration(mdp, cfg.epsilon, cfg.gamma)
    optimal = exact_soft_policy_eval(mdp, softmax_policy(q_star, cfg.epsilon), 0.0, 1.0).return_only
    demos = generate_demos(mdp, q_star, cfg.epsilon, 0.3, 5000, 123, steps)
    t0 = time.perf_counter()
    runs = {alg: [train(dataclasses.replace(cfg, algorithm=alg, seed=s), demos=demos) for s in SEEDS] for alg in ALGORITHMS}
    return Study(cfg, optimal, demos.meta.measured_return, runs, time.perf_counter() - t0), demos


def eval_curve(result):
    return [(r["step"], r["eval_return_mean"]) for r in result.metrics if not math.isnan(r["eval_return_mean"])]


def first_hit(result, threshold, horizon):
    """Env steps to the first evaluation at or above ``threshold``; never reaching counts as ``horizon``."""
    return next((s for s, v in eval_curve(result) if v >= threshold), horizon)


def transition_drop(result, n_p):
    curve = eval_curve(result)
    before = [v for s, v in curve if n_p - 2000 < s <= n_p]
    after = [v for s, v in curve if n_p < s <= n_p + 4000]
    return float(np.mean(before) - np.min(after))


def criterion_4(st):
    thr = 0.9 * st.optimal_return
    n = st.cfg.max_timesteps
    ours = [first_hit(r, thr, n) for r in st.runs["ours"]]
    base = [first_hit(r, thr, n) for r in st.runs["soft_q"]]
    ratio = np.median(ours) / np.median(base)
    censored = sum(h == n for h in base)
    ok = ratio <= 0.6 and st.seconds < 900
    return ok, (f"median steps to 90% of optimal ({thr:.3f}): ours {np.median(ours):.0f}, soft_q {np.median(base):.0f} "
                f"({censored} censored at {n}); ratio {ratio:.2f} (<= 0.6); {st.seconds:.0f}s for {3 * len(SEEDS)} runs")


def criterion_5(st):
    finals = []
    for r in st.runs["ours"]:
        vals = [v for _, v in eval_curve(r)]
        finals.append(float(np.mean(vals[-(len(vals) // 4):])))
    wins = sum(f > st.demo_return for f in finals)
    return wins >= 8, f"final-quarter return above demo return {st.demo_return:.3f} in {wins}/10 seeds (>= 8)"


def criterion_6(st):
    n_p = st.cfg.pretrain_steps
    ours = np.median([transition_drop(r, n_p) for r in st.runs["ours"]])
    bc = np.median([transition_drop(r, n_p) for r in st.runs["bc"]])
    return ours <= bc and bc > 0, f"median drop ours {ours:.3f} <= bc {bc:.3f}, bc > 0"


def criterion_8(st):
    early, closed_zero, audit = True, True, True
    for r in st.runs["ours"]:
        fracs = [row["gate_active_frac"] for row in r.metrics
                 if row["phase"] == "pretrain" and not math.isnan(row["gate_active_frac"])]
        early = early and fracs[0] > 0
        u = r.updates
        pre = u["phase"] == "pretrain"
        closed_zero = closed_zero and bool(np.all(u["l_q"][~u["gate_active"]] == 0))
        audit = audit and np.array_equal(u["gate_active"][pre], u["alpha_hat"][pre] < 0)
        audit = audit and np.array_equal(u["l_q"][pre], np.maximum(-u["alpha_hat"][pre], 0.0))
    return early and closed_zero and audit, f"early gate activity {early}; l_q = 0 when closed {closed_zero}; branch audit {audit}"


@pytest.fixture(scope="module")
def study():
    return run_study()


def test_criterion_1_identity_suite(emit):
    emit(1, *criterion_1())


def test_criterion_2_gradient_oracles(emit):
    emit(2, *criterion_2())


def test_criterion_3_oracle_equivalence(emit):
    emit(3, *criterion_3())


def test_criterion_4_pretraining_speedup(emit, study):
    emit(4, *criterion_4(study[0]))


def test_criterion_5_exceeds_demonstrations(emit, study):
    emit(5, *criterion_5(study[0]))


def test_criterion_6_smoother_transition(emit, study):
    emit(6, *criterion_6(study[0]))


def test_criterion_7_reductions(emit, study):
    emit(7, *criterion_7(study[0].cfg, study[1]))


def test_criterion_8_gate(emit, study):
    emit(8, *criterion_8(study[0]))


if __name__ == "__main__":
    st, demos = run_study()
    checks = [criterion_1(), criterion_2(), criterion_3(), criterion_4(st), criterion_5(st), criterion_6(st),
              criterion_7(st.cfg, demos), criterion_8(st)]
    for n, (ok, text) in enumerate(checks, start=1):
        report(n, ok, text)
