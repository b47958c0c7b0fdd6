"""Soft Q-learning pretrained from reward-free demonstrations, on tabular MDPs."""
from .data import DemoDataset, DemoMeta, ReplayBuffer, demo_load, demo_save, generate_demos
from .losses import (
    DemoBatch,
    ReplayBatch,
    alpha_hat,
    bc_grad,
    demo_policy_grad,
    demo_q_grad,
    dqfd_margin_grad,
    pretrain_grad,
    soft_q_grad,
    td_target,
)
from .mdp import GridWorldSpec, TabularMDP, build_gridworld, build_layered_mdp, make_env, rollout
from .models import GradAccumulator, MLPQ, TabularQ, finite_diff_grad, load_checkpoint, save_checkpoint
from .soft import (
    advantage,
    entropy,
    exact_q_pi,
    exact_soft_policy_eval,
    soft_value,
    soft_value_iteration,
    softmax_policy,
)
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
