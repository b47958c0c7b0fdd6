"""Q-function approximators with hand-written reverse mode.

Both model kinds keep all trainable parameters in one flat vector and expose
batched ``forward`` / ``backward``. ``forward`` accepts an explicit
``params`` vector, which is how detached copies (stop-gradient factors) and
complex-step probes are evaluated without touching the live parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_FORMAT = "softq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GradAccumulator:
    grad: np.ndarray
    count: int = 0

    @classmethod
    def like(cls, model: "QModel") -> "GradAccumulator":
        return cls(np.zeros(model.n_params))

    def zero(self) -> None:
        self.grad[:] = 0.0
        self.count = 0

    def add(self, other: "GradAccumulator", weight: float = 1.0) -> None:
        if other.grad.shape != self.grad.shape:
            raise ValueError("accumulator length mismatch")
        self.grad += weight * other.grad
        self.count += other.count


class QModel:
    """Base class: a parameter vector plus a layout of named segments."""

    kind = "base"

    def __init__(self, n_actions: int, layout: dict[str, tuple[int, ...]]):
        self.n_actions = n_actions
        self.layout: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout.items():
            size = int(np.prod(shape))
            self.layout[name] = (slice(offset, offset + size), shape)
            offset += size
        self.params = np.zeros(offset)

    @property
    def n_params(self) -> int:
        return self.params.size

    def unpack(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        p = self.params if params is None else params
        return {name: p[sl].reshape(shape) for name, (sl, shape) in self.layout.items()}

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, p: np.ndarray) -> None:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != self.params.shape:
            raise ValueError(f"expected {self.n_params} parameters, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameters must be finite")
        self.params[:] = p

    def clone(self) -> "QModel":
        other = self._empty_like()
        other.params = self.params.copy()
        return other

    def forward(self, states, params: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, states, adjoint: np.ndarray, acc: GradAccumulator) -> None:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def _empty_like(self) -> "QModel":
        return model_from_config(self.config())


class TabularQ(QModel):
    """One parameter per (state, action); zero-initialized."""

    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int):
        super().__init__(n_actions, {"table": (n_states, n_actions)})
        self.n_states = n_states

    def _index(self, states) -> np.ndarray:
        s = np.asarray(states)
        if s.dtype.kind not in "iu":
            raise TypeError("tabular models take integer state ids")
        if np.any(s < 0) or np.any(s >= self.n_states):
            raise IndexError(f"state id out of range [0, {self.n_states})")
        return s

    def forward(self, states, params=None):
        s = self._index(states)
        return self.unpack(params)["table"][s]

    def backward(self, states, adjoint, acc):
        s = self._index(states)
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape[-1] != self.n_actions:
            raise ValueError("adjoint length must equal n_actions")
        if acc.grad.shape != self.params.shape:
            raise ValueError("accumulator length mismatch")
        table = acc.grad.reshape(self.n_states, self.n_actions)
        np.add.at(table, s, adjoint)

    def config(self):
        return {"kind": self.kind, "n_states": self.n_states, "n_actions": self.n_actions}


class MLPQ(QModel):
    """One tanh hidden layer and a linear head.

    ``encoding="onehot"`` takes integer state ids in ``[0, n_inputs)``;
    ``encoding="features"`` takes float rows of length ``n_inputs``.
    """

    kind = "mlp"

    def __init__(self, n_inputs: int, n_actions: int, hidden: int = 64, encoding: str = "onehot", seed: int | None = None):
        if encoding not in ("onehot", "features"):
            raise ValueError(f"unknown encoding {encoding!r}")
        super().__init__(
            n_actions,
            {"w1": (n_inputs, hidden), "b1": (hidden,), "w2": (hidden, n_actions), "b2": (n_actions,)},
        )
        self.n_inputs = n_inputs
        self.hidden = hidden
        self.encoding = encoding
        self._eye = np.eye(n_inputs)
        if seed is not None:
            self.init(seed)

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        p = self.unpack()
        p["w1"][:] = rng.uniform(-1, 1, p["w1"].shape) / np.sqrt(self.n_inputs)
        p["w2"][:] = rng.uniform(-1, 1, p["w2"].shape) / np.sqrt(self.hidden)
        p["b1"][:] = 0.0
        p["b2"][:] = 0.0

    def encode(self, states) -> np.ndarray:
        if self.encoding == "onehot":
            s = np.asarray(states)
            if s.dtype.kind not in "iu":
                raise TypeError("onehot encoding takes integer state ids")
            if np.any(s < 0) or np.any(s >= self.n_inputs):
                raise IndexError(f"state id out of range [0, {self.n_inputs})")
            return self._eye[s]
        x = np.asarray(states, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise ValueError(f"feature vectors must have length {self.n_inputs}")
        return x

    def _hidden(self, x, p):
        return np.tanh(x @ p["w1"] + p["b1"])

    def forward(self, states, params=None):
        p = self.unpack(params)
        h = self._hidden(self.encode(states), p)
        return h @ p["w2"] + p["b2"]

    def backward(self, states, adjoint, acc):
        adjoint = np.asarray(adjoint, dtype=np.float64)
        if adjoint.shape[-1] != self.n_actions:
            raise ValueError("adjoint length must equal n_actions")
        if acc.grad.shape != self.params.shape:
            raise ValueError("accumulator length mismatch")
        p = self.unpack()
        x = self.encode(states).reshape(-1, self.n_inputs)
        g_out = adjoint.reshape(-1, self.n_actions)
        h = self._hidden(x, p)
        g = self.unpack(acc.grad)
        g["w2"] += h.T @ g_out
        g["b2"] += g_out.sum(axis=0)
        g_pre = (g_out @ p["w2"].T) * (1.0 - h * h)
        g["w1"] += x.T @ g_pre
        g["b1"] += g_pre.sum(axis=0)

    def config(self):
        return {
            "kind": self.kind,
            "n_inputs": self.n_inputs,
            "n_actions": self.n_actions,
            "hidden": self.hidden,
            "encoding": self.encoding,
        }


def model_from_config(cfg: dict) -> QModel:
    if cfg["kind"] == "tabular":
        return TabularQ(int(cfg["n_states"]), int(cfg["n_actions"]))
    if cfg["kind"] == "mlp":
        return MLPQ(int(cfg["n_inputs"]), int(cfg["n_actions"]), int(cfg["hidden"]), cfg.get("encoding", "onehot"))
    raise ValueError(f"unknown model kind {cfg['kind']!r}")


def make_model(kind: str, n_states: int, n_actions: int, hidden: int = 64, seed: int = 0) -> QModel:
    if kind == "tabular":
        return TabularQ(n_states, n_actions)
    if kind == "mlp":
        return MLPQ(n_states, n_actions, hidden=hidden, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


# spec-level function names -------------------------------------------------

def q_forward(model: QModel, state) -> np.ndarray:
    return model.forward(state)


def q_backward(model: QModel, state, adjoint, acc: GradAccumulator) -> None:
    model.backward(state, adjoint, acc)


def params_get(model: QModel) -> np.ndarray:
    return model.get_params()


def params_set(model: QModel, p: np.ndarray) -> None:
    model.set_params(p)


def finite_diff_grad(model: QModel, loss_fn, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(params)`` around the model's parameters.

    ``loss_fn`` receives a full parameter vector; the model's own parameters
    are left untouched.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    theta = model.get_params()
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        up = loss_fn(probe)
        probe[i] = theta[i] - h
        down = loss_fn(probe)
        probe[i] = theta[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        grad[i] = (up - down) / (2 * h)
    return grad


def save_checkpoint(model: QModel, path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "params": model.params.tolist(),
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[QModel, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    model = model_from_config(doc["model"])
    model.set_params(np.asarray(doc["params"], dtype=np.float64))
    return model, doc.get("extra", {})
