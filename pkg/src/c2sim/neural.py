"""Small feed-forward networks with hand-written gradients.

Enough machinery for the 128/64 actor-critic pair: tanh MLPs, analytic
backprop, adaptive-moment updates, stabilized categorical sampling, and a
versioned checkpoint format. No autodiff graph, everything is numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeMismatchError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class MlpParams:
    """Weights and biases of a feed-forward net with a linear output head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"  # hidden-layer nonlinearity: tanh | linear

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ShapeMismatchError("weights/biases length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeMismatchError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(f"layer {i}: input dim mismatch")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def orthogonal(rng: np.random.Generator, shape: tuple[int, int],
               gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight matrix scaled by gain."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: tuple[int, ...],
             out_dim: int, out_gain: float = 1.0,
             activation: str = "tanh") -> MlpParams:
    """Orthogonal initialization: gain sqrt(2) for hidden layers, a caller
    supplied gain for the output head (small for actors, 1 for critics)."""
    dims = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        gain = out_gain if i == len(dims) - 2 else np.sqrt(2.0)
        weights.append(orthogonal(rng, (dims[i], dims[i + 1]), gain))
        biases.append(np.zeros(dims[i + 1]))
    return MlpParams(weights=weights, biases=biases, activation=activation)


def _activate(p: MlpParams, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if p.activation == "tanh" else z


def forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; accepts a single vector or a batch."""
    out, _ = forward_cached(p, x)
    return out


def forward_cached(p: MlpParams, x: np.ndarray):
    """Forward pass returning (output, activations) for use by backward."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    if h.shape[1] != p.in_dim:
        raise ShapeMismatchError(
            f"input dim {h.shape[1]} does not match network ({p.in_dim})"
        )
    acts = [h]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = z if i == last else _activate(p, z)
        acts.append(h)
    return (h[0] if single else h), acts


def backward(p: MlpParams, x: np.ndarray, upstream: np.ndarray) -> MlpGrads:
    """Analytic parameter gradients given dLoss/dOutput.

    The upstream gradient must match the forward output shape for ``x``.
    """
    _, acts = forward_cached(p, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1 and acts[-1].shape[0] == 1:
        g = g.reshape(1, -1)
    if g.shape != acts[-1].shape:
        raise ShapeMismatchError(
            f"upstream shape {g.shape} does not match output {acts[-1].shape}"
        )
    n_layers = len(p.weights)
    w_grads: list[np.ndarray] = [None] * n_layers
    b_grads: list[np.ndarray] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        a_in = acts[i]
        w_grads[i] = a_in.T @ g
        b_grads[i] = g.sum(axis=0)
        if i > 0:
            g = g @ p.weights[i].T
            if p.activation == "tanh":
                g = g * (1.0 - acts[i] ** 2)
    return MlpGrads(weights=w_grads, biases=b_grads)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators, one pair per parameter tensor."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_weights: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)


def adam_init(p: MlpParams, lr: float) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        m_weights=[np.zeros_like(w) for w in p.weights],
        v_weights=[np.zeros_like(w) for w in p.weights],
        m_biases=[np.zeros_like(b) for b in p.biases],
        v_biases=[np.zeros_like(b) for b in p.biases],
    )


def adam_step(state: OptimizerState, p: MlpParams, grads: MlpGrads):
    """One bias-corrected moment update. Mutates and returns (state, p)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for ms, vs, params, gs in (
        (state.m_weights, state.v_weights, p.weights, grads.weights),
        (state.m_biases, state.v_biases, p.biases, grads.biases),
    ):
        for m, v, theta, g in zip(ms, vs, params, gs):
            if g.shape != theta.shape:
                raise ShapeMismatchError(
                    f"gradient shape {g.shape} vs parameter {theta.shape}"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            theta -= scale * m / (np.sqrt(v) + state.eps)
    return state, p


# ---------------------------------------------------------------------------
# Categorical policy head


def log_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by max subtraction."""
    z = scores - np.max(scores, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(scores: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(scores))


def entropy(scores: np.ndarray) -> np.ndarray:
    """Entropy of the categorical distribution for each score row."""
    logp = log_softmax(scores)
    return -np.sum(np.exp(logp) * logp, axis=-1)


def categorical_sample(scores: np.ndarray, rng: np.random.Generator):
    """Sample an index from softmax(scores); returns (index, log-probability).

    Inverse-CDF sampling keeps the draw reproducible from a single uniform.
    """
    logp = log_softmax(np.asarray(scores, dtype=np.float64))
    probs = np.exp(logp)
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(probs) - 1)
    return idx, float(logp[idx])


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, nets: dict[str, MlpParams],
                    opts: dict[str, OptimizerState], meta: dict) -> None:
    """Write all tensors plus optimizer state as a versioned npz archive."""
    arrays: dict[str, np.ndarray] = {}
    manifest: dict = {"version": CHECKPOINT_VERSION, "meta": meta, "nets": {}, "opts": {}}
    for name, p in nets.items():
        manifest["nets"][name] = {
            "layers": len(p.weights), "activation": p.activation,
        }
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    for name, s in opts.items():
        manifest["opts"][name] = {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
            "eps": s.eps, "step": s.step, "layers": len(s.m_weights),
        }
        for i in range(len(s.m_weights)):
            arrays[f"{name}_mw{i}"] = s.m_weights[i]
            arrays[f"{name}_vw{i}"] = s.v_weights[i]
            arrays[f"{name}_mb{i}"] = s.m_biases[i]
            arrays[f"{name}_vb{i}"] = s.v_biases[i]
    arrays["manifest"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect: dict[str, tuple[int, int]] | None = None):
    """Read a checkpoint; returns (nets, opts, meta).

    ``expect`` maps net name to a required (in_dim, out_dim); any shape
    inconsistency raises CheckpointError instead of returning garbage.
    """
    with np.load(path) as data:
        if "manifest" not in data:
            raise CheckpointError("not a checkpoint: missing manifest")
        manifest = json.loads(bytes(data["manifest"].tobytes()).decode("utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {manifest.get('version')}"
            )
        nets: dict[str, MlpParams] = {}
        for name, spec in manifest["nets"].items():
            try:
                weights = [data[f"{name}_w{i}"] for i in range(spec["layers"])]
                biases = [data[f"{name}_b{i}"] for i in range(spec["layers"])]
            except KeyError as exc:
                raise CheckpointError(f"missing tensor for net {name}: {exc}") from exc
            try:
                nets[name] = MlpParams(
                    weights=weights, biases=biases, activation=spec["activation"]
                )
            except ShapeMismatchError as exc:
                raise CheckpointError(f"net {name}: {exc}") from exc
        opts: dict[str, OptimizerState] = {}
        for name, spec in manifest["opts"].items():
            opts[name] = OptimizerState(
                lr=spec["lr"], beta1=spec["beta1"], beta2=spec["beta2"],
                eps=spec["eps"], step=spec["step"],
                m_weights=[data[f"{name}_mw{i}"] for i in range(spec["layers"])],
                v_weights=[data[f"{name}_vw{i}"] for i in range(spec["layers"])],
                m_biases=[data[f"{name}_mb{i}"] for i in range(spec["layers"])],
                v_biases=[data[f"{name}_vb{i}"] for i in range(spec["layers"])],
            )
    if expect:
        for name, (in_dim, out_dim) in expect.items():
            if name not in nets:
                raise CheckpointError(f"checkpoint has no net {name!r}")
            got = (nets[name].in_dim, nets[name].out_dim)
            if got != (in_dim, out_dim):
                raise CheckpointError(
                    f"net {name!r} has shape {got}, expected {(in_dim, out_dim)}"
                )
    return nets, opts, manifest["meta"]
