"""Trainable action-scoring policy: a small MLP with a softmax head.

Forward produces a probability distribution over the six actions; backward
computes exact reverse-mode gradients of the logits contracted with an
upstream gradient; optimization uses an adaptive-moment (Adam) update.
All math runs in double precision: calibration quantiles and gate boundaries
downstream are sensitive to rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gridworld import Action

N_ACTIONS = len(Action)
DEFAULT_HIDDEN = (256, 256)


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the expected architecture."""


@dataclass
class PolicyParams:
    weights: list  # list[np.ndarray], weights[i] has shape (fan_in, fan_out)
    biases: list   # list[np.ndarray]
    seed: int = 0

    @property
    def arch(self) -> tuple:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class Gradients:
    weights: list
    biases: list


@dataclass
class OptimizerState:
    m_weights: list
    m_biases: list
    v_weights: list
    v_biases: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_params(feature_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0) -> PolicyParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    sizes = [feature_dim, *hidden, N_ACTIONS]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return PolicyParams(weights=weights, biases=biases, seed=seed)


def zero_params(feature_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN) -> PolicyParams:
    """All-zero parameters: the policy outputs the uniform distribution everywhere."""
    sizes = [feature_dim, *hidden, N_ACTIONS]
    return PolicyParams(
        weights=[np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])],
        biases=[np.zeros(o) for o in sizes[1:]],
        seed=0,
    )


def _as_batch(features: np.ndarray, feature_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != feature_dim:
        raise ValueError(f"expected features with dimension {feature_dim}, got shape {x.shape}")
    return x, single


def logits(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    x, single = _as_batch(features, params.arch[0])
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h[0] if single else h


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Confidence vector(s) over the six actions; rows sum to 1."""
    return softmax(logits(params, features))


def backward(params: PolicyParams, features: np.ndarray, upstream_grad_on_logits: np.ndarray) -> Gradients:
    """Gradients of sum(logits * upstream) w.r.t. every parameter."""
    x, single = _as_batch(features, params.arch[0])
    g = np.asarray(upstream_grad_on_logits, dtype=np.float64)
    if single and g.ndim == 1:
        g = g[None, :]
    if g.shape != (x.shape[0], N_ACTIONS):
        raise ValueError(f"upstream gradient shape {g.shape} does not match batch ({x.shape[0]}, {N_ACTIONS})")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite upstream gradient")

    last = len(params.weights) - 1
    activations = [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        activations.append(h)

    d_weights = [None] * len(params.weights)
    d_biases = [None] * len(params.biases)
    delta = g
    for i in range(last, -1, -1):
        d_weights[i] = activations[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - activations[i] ** 2)
    return Gradients(weights=d_weights, biases=d_biases)


def adam_init(
    params: PolicyParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    return OptimizerState(
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def optimizer_step(
    params: PolicyParams, grads: Gradients, state: OptimizerState
) -> tuple[PolicyParams, OptimizerState]:
    """Bias-corrected adaptive-moment update; pure (inputs are not mutated)."""
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def update(p, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        p_new = p - state.learning_rate * (m_new / corr1) / (np.sqrt(v_new / corr2) + state.eps)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        pn, mn, vn = update(p, g, m, v)
        new_w.append(pn)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        pn, mn, vn = update(p, g, m, v)
        new_b.append(pn)
        new_mb.append(mn)
        new_vb.append(vn)

    new_params = PolicyParams(weights=new_w, biases=new_b, seed=params.seed)
    new_state = OptimizerState(
        m_weights=new_mw,
        m_biases=new_mb,
        v_weights=new_vw,
        v_biases=new_vb,
        step_count=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    params: PolicyParams,
    opt_state: Optional[OptimizerState] = None,
    rng_state: Optional[dict] = None,
    meta: Optional[dict] = None,
) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if opt_state is not None:
        for i in range(len(params.weights)):
            arrays[f"m_w{i}"] = opt_state.m_weights[i]
            arrays[f"m_b{i}"] = opt_state.m_biases[i]
            arrays[f"v_w{i}"] = opt_state.v_weights[i]
            arrays[f"v_b{i}"] = opt_state.v_biases[i]
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": list(params.arch),
        "n_layers": len(params.weights),
        "seed": params.seed,
        "has_optimizer": opt_state is not None,
        "optimizer": (
            {
                "step_count": opt_state.step_count,
                "learning_rate": opt_state.learning_rate,
                "beta1": opt_state.beta1,
                "beta2": opt_state.beta2,
                "eps": opt_state.eps,
            }
            if opt_state is not None
            else None
        ),
        "rng_state": rng_state,
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, expect_arch: Optional[Sequence[int]] = None):
    """Returns (params, opt_state or None, rng_state or None, meta)."""
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "header" not in data:
        raise CheckpointError(f"checkpoint {path} has no header")
    header = json.loads(bytes(data["header"]).decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version: {header.get('version')}")
    arch = tuple(header["arch"])
    if expect_arch is not None and tuple(expect_arch) != arch:
        raise CheckpointError(f"architecture mismatch: checkpoint {arch}, expected {tuple(expect_arch)}")
    n_layers = header["n_layers"]
    weights, biases = [], []
    for i in range(n_layers):
        w, b = data[f"w{i}"], data[f"b{i}"]
        if w.shape != (arch[i], arch[i + 1]) or b.shape != (arch[i + 1],):
            raise CheckpointError(f"layer {i} arrays do not match architecture {arch}")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    params = PolicyParams(weights=weights, biases=biases, seed=header.get("seed", 0))
    opt_state = None
    if header.get("has_optimizer"):
        o = header["optimizer"]
        opt_state = OptimizerState(
            m_weights=[data[f"m_w{i}"].astype(np.float64) for i in range(n_layers)],
            m_biases=[data[f"m_b{i}"].astype(np.float64) for i in range(n_layers)],
            v_weights=[data[f"v_w{i}"].astype(np.float64) for i in range(n_layers)],
            v_biases=[data[f"v_b{i}"].astype(np.float64) for i in range(n_layers)],
            step_count=o["step_count"],
            learning_rate=o["learning_rate"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
        )
    return params, opt_state, header.get("rng_state"), header.get("meta", {})
