"""Soft Q-learning with a demonstration pretraining phase.

One loop iteration is one environment step. The first ``replay_start_size``
steps act uniformly at random and only fill the replay buffer. After that
the agent acts with ``softmax(Q / epsilon)`` and updates every
``learning_frequency`` steps; updates before ``pretrain_steps`` mix in the
demonstration gradient of the chosen algorithm, later ones are plain soft
Q-learning on replay data.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .data import DemoBuffer, DemoDataset, ReplayBuffer, demo_load
from .losses import (
    LossReport,
    bc_grad,
    margin_grad,
    pretrain_grad,
    soft_q_grad,
)
from .mdp import Simulator, TabularMDP, make_env
from .models import GradAccumulator, QModel, make_model, save_checkpoint
from .soft import softmax_policy

log = logging.getLogger(__name__)

ALGORITHMS = ("ours", "soft_q", "bc", "dqfd")
METRIC_COLUMNS = (
    "step",
    "episodes",
    "phase",
    "eval_return_mean",
    "eval_return_std",
    "soft_q_loss",
    "l_pi",
    "l_q",
    "alpha_hat",
    "gate_active_frac",
    "entropy_mean",
    "learning_rate",
)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "ours"
    env: str = "grid5x5"
    seed: int = 0
    epsilon: float = 0.1
    gamma: float = 0.99
    lam: float = 1.0
    pretrain_steps: int = 20_000
    max_timesteps: int = 200_000
    minibatch_size: int = 32
    replay_buffer_size: int = 50_000
    replay_start_size: int = 1_000
    learning_frequency: int = 4
    target_update_frequency: int = 500
    initial_learning_rate: float = 1e-4
    final_learning_rate: float = 5e-5
    lr_decay_end_step: int = 40_000
    dqfd_margin: float = 0.8
    demo_path: str = ""
    eval_every: int = 2_000
    eval_episodes: int = 20
    out_dir: str = ""
    model: str = "mlp"
    hidden: int = 64
    log_every_updates: int = 100

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0 <= self.pretrain_steps <= self.max_timesteps:
            raise ConfigError("need 0 <= pretrain_steps <= max_timesteps")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.minibatch_size > self.replay_start_size:
            raise ConfigError("minibatch_size cannot exceed replay_start_size")
        for name in ("minibatch_size", "replay_buffer_size", "learning_frequency", "target_update_frequency",
                     "eval_every", "eval_episodes", "log_every_updates", "lr_decay_end_step", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model not in ("tabular", "mlp"):
            raise ConfigError(f"model must be 'tabular' or 'mlp', got {self.model!r}")

    @property
    def uses_demos(self) -> bool:
        return self.algorithm != "soft_q" and self.pretrain_steps > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(names))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = {}
        for key, value in doc.items():
            default = names[key].default
            try:
                values[key] = type(default)(value) if not isinstance(default, bool) else bool(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: cannot convert {value!r} to {type(default).__name__}") from None
        return cls(**values)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping of key: value pairs")
    return TrainConfig.from_dict(doc)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear from initial to final over ``[0, lr_decay_end_step]``, then flat."""
    frac = min(step, config.lr_decay_end_step) / config.lr_decay_end_step
    return config.initial_learning_rate + frac * (config.final_learning_rate - config.initial_learning_rate)


class Adam:
    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def evaluate(
    model: QModel,
    mdp: TabularMDP,
    n_episodes: int,
    epsilon: float,
    rng_seed,
    max_steps: int = 100,
) -> tuple[float, float]:
    """Mean and std of raw (unregularized) returns of ``softmax(Q / epsilon)``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    policy = softmax_policy(model.forward(np.arange(mdp.n_states)), epsilon)
    return _evaluate_table(policy, mdp, n_episodes, np.random.default_rng(rng_seed), max_steps)


def _evaluate_table(policy, mdp, n_episodes, rng, max_steps):
    cdf = np.cumsum(policy, axis=1)
    cdf[:, -1] = 1.0
    sim = Simulator(mdp, max_steps, rng)
    returns = np.empty(n_episodes)
    for i in range(n_episodes):
        s = sim.reset()
        total = 0.0
        while True:
            a = int(np.searchsorted(cdf[s], rng.random(), side="right"))
            s, r, done, truncated = sim.step(a)
            total += r
            if done or truncated:
                break
        returns[i] = total
    return float(returns.mean()), float(returns.std())


@dataclass
class RunState:
    config: TrainConfig
    model: QModel
    target: QModel
    optimizer: Adam
    replay: ReplayBuffer
    demos: DemoBuffer | None
    step: int = 0
    phase: str = "warmup"
    target_syncs: list = field(default_factory=list)


def sync_target(run: RunState) -> None:
    run.target.params[:] = run.model.params
    run.target_syncs.append(run.step)


def phase_at(step: int, config: TrainConfig) -> str:
    if step < config.replay_start_size:
        return "warmup"
    if step < config.pretrain_steps:
        return "pretrain"
    return "online"


@dataclass
class TrainResult:
    model: QModel
    metrics: list[dict]
    updates: dict[str, np.ndarray]
    target_syncs: list[int]
    demo_reads: int = 0
    demo_last_read_step: int = -1
    pretrain_params: np.ndarray | None = None
    aborted: bool = False


class _Window:
    """Running means of loss fields between two metrics rows."""

    FIELDS = ("soft_q_loss", "l_pi", "l_q", "alpha_hat", "entropy_mean")

    def __init__(self):
        self.reset()

    def reset(self):
        self.n = 0
        self.gate = 0
        self.sums = dict.fromkeys(self.FIELDS, 0.0)

    def add(self, rep: LossReport):
        self.n += 1
        self.gate += int(rep.gate_active)
        for k in self.FIELDS:
            self.sums[k] += getattr(rep, k)

    def row(self) -> dict:
        if self.n == 0:
            return {**dict.fromkeys(self.FIELDS, math.nan), "gate_active_frac": math.nan}
        out = {k: v / self.n for k, v in self.sums.items()}
        out["gate_active_frac"] = self.gate / self.n
        return out


def train(config: TrainConfig, demos: DemoDataset | None = None) -> TrainResult:
    """Run one training job; writes metrics, config and checkpoints when ``out_dir`` is set."""
    config.validate()
    mdp, max_episode_steps = make_env(config.env)
    demo_buf = None
    if config.uses_demos:
        if demos is None:
            if not config.demo_path:
                raise ConfigError(f"algorithm {config.algorithm!r} with pretrain_steps > 0 needs demo_path")
            demos = demo_load(config.demo_path, env=mdp)
        elif demos.meta.env_hash != mdp.content_hash():
            raise ConfigError("demonstrations were generated on a different environment (hash mismatch)")
        demo_buf = demos.buffer()

    seeds = np.random.SeedSequence(config.seed).spawn(6)
    env_rng, act_rng, replay_rng, demo_rng, eval_rng, init_ss = (np.random.default_rng(s) for s in seeds)
    init_seed = int(init_ss.integers(2**31))

    S, A = mdp.n_states, mdp.n_actions
    model = make_model(config.model, S, A, hidden=config.hidden, seed=init_seed)
    run = RunState(
        config=config,
        model=model,
        target=model.clone(),
        optimizer=Adam(model.n_params),
        replay=ReplayBuffer(config.replay_buffer_size),
        demos=demo_buf,
    )
    all_states = np.arange(S)
    eps = config.epsilon
    n_batch = config.minibatch_size

    def policy_cdf():
        cdf = np.cumsum(softmax_policy(model.forward(all_states), eps), axis=1)
        cdf[:, -1] = 1.0
        return cdf

    cdf = policy_cdf()
    sim = Simulator(mdp, max_episode_steps, env_rng)
    s = sim.reset()
    episodes = 0
    window = _Window()
    metrics: list[dict] = []
    audit = {"step": [], "alpha_hat": [], "gate_active": [], "l_q": [], "phase": []}
    acc = GradAccumulator.like(model)
    pretrain_params = None
    n_updates = 0
    aborted = False

    for t in range(config.max_timesteps):
        run.step = t
        run.phase = phase_at(t, config)
        if run.phase == "warmup":
            a = int(act_rng.integers(A))
        else:
            a = int(np.searchsorted(cdf[s], act_rng.random(), side="right"))
        s2, r, done, truncated = sim.step(a)
        run.replay.add(s, a, r, s2, done)
        if done or truncated:
            episodes += 1
            s = sim.reset()
        else:
            s = s2

        if t == config.pretrain_steps and config.pretrain_steps > 0:
            pretrain_params = model.get_params()
            _maybe_checkpoint(config, model, "pretrain")

        row_due = False
        if run.phase != "warmup":
            since = t - config.replay_start_size
            if since % config.target_update_frequency == 0:
                sync_target(run)
            if since % config.learning_frequency == 0:
                acc.zero()
                rep = _update_gradient(run, acc, replay_rng, demo_rng)
                if not (np.isfinite(rep.soft_q_loss) and np.all(np.isfinite(acc.grad))):
                    aborted = True
                    metrics.append(_row(t + 1, episodes, "aborted", None, window.row(), learning_rate(t, config)))
                    log.error("non-finite loss at step %d; aborting run", t)
                    break
                run.optimizer.step(model.params, acc.grad, learning_rate(t, config))
                cdf = policy_cdf()
                window.add(rep)
                n_updates += 1
                audit["step"].append(t)
                audit["alpha_hat"].append(rep.alpha_hat)
                audit["gate_active"].append(rep.gate_active)
                audit["l_q"].append(rep.l_q)
                audit["phase"].append(run.phase)
                row_due = n_updates % config.log_every_updates == 0

        eval_due = (t + 1) % config.eval_every == 0
        if eval_due or row_due:
            ev = None
            if eval_due:
                ev = _evaluate_table(softmax_policy(model.forward(all_states), eps), mdp, config.eval_episodes,
                                     np.random.default_rng(eval_rng.integers(2**63)), max_episode_steps)
            metrics.append(_row(t + 1, episodes, run.phase, ev, window.row(), learning_rate(t, config)))
            window.reset()

    if pretrain_params is None and config.pretrain_steps == config.max_timesteps > 0:
        pretrain_params = model.get_params()
        _maybe_checkpoint(config, model, "pretrain")
    result = TrainResult(
        model=model,
        metrics=metrics,
        updates={k: np.asarray(v) for k, v in audit.items()},
        target_syncs=run.target_syncs,
        demo_reads=demo_buf.reads if demo_buf is not None else 0,
        demo_last_read_step=demo_buf.last_read_step if demo_buf is not None else -1,
        pretrain_params=pretrain_params,
        aborted=aborted,
    )
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        save_config(config, os.path.join(config.out_dir, "config.yaml"))
        write_metrics(metrics, os.path.join(config.out_dir, "metrics.csv"))
        _maybe_checkpoint(config, model, "final")
    return result


def _maybe_checkpoint(config: TrainConfig, model: QModel, tag: str) -> None:
    if not config.out_dir:
        return
    os.makedirs(config.out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(config.out_dir, f"checkpoint_{tag}.json"),
                    extra={"env": config.env, "epsilon": config.epsilon, "tag": tag})


def _update_gradient(run: RunState, acc: GradAccumulator, replay_rng, demo_rng) -> LossReport:
    cfg = run.config
    replay = run.replay.sample(cfg.minibatch_size, replay_rng)
    model, target = run.model, run.target
    if run.phase != "pretrain" or cfg.algorithm == "soft_q" or run.demos is None:
        return soft_q_grad(model, target, replay, cfg.epsilon, cfg.gamma, acc)
    demo = run.demos.sample(cfg.minibatch_size, demo_rng, step=run.step)
    if cfg.algorithm == "ours":
        return pretrain_grad(model, target, replay, demo, cfg.epsilon, cfg.gamma, cfg.lam, acc)
    rep = soft_q_grad(model, target, replay, cfg.epsilon, cfg.gamma, acc)
    extra = GradAccumulator.like(model)
    if cfg.algorithm == "bc":
        rep.bc_loss = bc_grad(model, demo, cfg.epsilon, extra)
        acc.grad += cfg.lam * cfg.epsilon * extra.grad
    else:
        rep.margin_loss = margin_grad(model, demo, cfg.dqfd_margin, extra)
        acc.grad += cfg.lam * extra.grad
    return rep


def _row(step, episodes, phase, ev, losses, lr) -> dict:
    row = {"step": step, "episodes": episodes, "phase": phase,
           "eval_return_mean": math.nan, "eval_return_std": math.nan}
    if ev is not None:
        row["eval_return_mean"], row["eval_return_std"] = ev
    row.update(losses)
    row["learning_rate"] = lr
    return row


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(["" if isinstance(row[c], float) and math.isnan(row[c]) else repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k == "phase":
                    row[k] = v
                elif k in ("step", "episodes"):
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else math.nan
            out.append(row)
    return out
