"""
Soft values, implicit policies and the demonstration gradient
=============================================================

A walk through the tabular side of the package on the snake-maze gridworld.
Run it top to bottom, or cell by cell in an editor that understands ``# %%``.
"""

# %%
# The fixture: a 5x5 maze with two wall rows, slip 0.1, goal reward 10.
import numpy as np

from softq_pretrain import make_env
from softq_pretrain.soft import bellman_residual, entropy, exact_soft_policy_eval, soft_value_iteration, softmax_policy

mdp, max_steps = make_env("grid5x5")
print(mdp.n_states, "states,", mdp.n_actions, "actions, time limit", max_steps)

# %%
# Soft value iteration. The temperature trades return for entropy.
for eps in (0.01, 0.1, 0.3):
    q, iters = soft_value_iteration(mdp, eps, 0.97)
    pi = softmax_policy(q, eps)
    ret = exact_soft_policy_eval(mdp, pi, 0.0, 1.0).return_only
    live = ~mdp.terminal
    print(f"eps {eps:5.2f}: {iters:4d} sweeps, residual {bellman_residual(mdp, q, eps, 0.97):.1e}, "
          f"return {ret:6.3f}, mean entropy {entropy(pi[live]).mean():.3f}")

# %%
# Imperfect experts: a soft-optimal policy mixed with uniform noise.
from softq_pretrain.data import behavior_policy

q_star, _ = soft_value_iteration(mdp, 0.1, 0.97)
opt = exact_soft_policy_eval(mdp, softmax_policy(q_star, 0.1), 0.0, 1.0).return_only
for noise in (0.0, 0.3, 0.6, 1.0):
    ret = exact_soft_policy_eval(mdp, behavior_policy(q_star, 0.1, noise), 0.0, 1.0).return_only
    print(f"noise {noise:.1f}: return {ret:7.3f} ({ret / opt:6.1%} of soft-optimal)")

# %%
# The demonstration gradient on an untrained model. The alpha gate opens
# when the demo actions look better than the constraint admits.
from softq_pretrain.data import generate_demos
from softq_pretrain.losses import DemoBatch, ReplayBatch, demo_policy_grad, demo_q_grad, pretrain_grad
from softq_pretrain.models import GradAccumulator, TabularQ

demos = generate_demos(mdp, q_star, 0.1, 0.3, 2000, 123, max_steps)
rng = np.random.default_rng(0)
model = TabularQ(mdp.n_states, mdp.n_actions)
model.set_params(rng.normal(0.0, 0.1, model.n_params))
idx = rng.integers(0, len(demos), 32)
demo = DemoBatch(demos.states[idx], demos.actions[idx])
replay = ReplayBatch(demos.states[idx], rng.integers(0, 4, 32), np.zeros(32), demos.states[idx], np.zeros(32, bool))
acc_pi, acc_q = GradAccumulator.like(model), GradAccumulator.like(model)
l_pi = demo_policy_grad(model, demo, replay, 0.1, acc_pi)
l_q = demo_q_grad(model, demo, replay, 0.1, acc_q)
report = pretrain_grad(model, model, replay, demo, 0.1, 0.97, 1.0, GradAccumulator.like(model))
print(f"L_pi {l_pi:.4f}, L_Q {l_q:.4f}, alpha_hat {report.alpha_hat:.4f}, gate active {report.gate_active}")
print("|g_pi|", np.linalg.norm(acc_pi.grad), "|g_Q|", np.linalg.norm(acc_q.grad))

# %%
# Every analytic gradient against finite differences and exact identities.
from softq_pretrain.verify import run_all

for report in run_all(0):
    print(report.line())
