"""Minimal dense-network runtime with explicit reverse-mode gradients.

Networks are plain weight/bias lists evaluated with batched matmuls. The
forward pass returns a tape; feeding the tape and an output cotangent to
backward() yields the input cotangent and parameter gradients. Nothing here
owns state: the optimizer maps (params, grads, opt state) to new values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class MlpParams:
    """Fully connected network, leaky-ReLU hidden layers, linear output."""

    weights: tuple[np.ndarray, ...]  # each (fan_in, fan_out)
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must align and be nonempty")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("layer shape mismatch")
        object.__setattr__(self, "weights", tuple(np.asarray(w, float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, float) for b in self.biases))

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def mlp_init(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


@dataclass(frozen=True)
class MlpTape:
    params: MlpParams
    inputs: tuple[np.ndarray, ...]  # layer inputs, including the network input
    preacts: tuple[np.ndarray, ...]


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Evaluate on a (..., d_in) batch; returns output and tape."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    inputs, preacts = [], []
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = z if k == last else np.where(z > 0.0, z, LEAKY_SLOPE * z)
    out = h[0] if squeeze else h
    return out, MlpTape(params=params, inputs=tuple(inputs), preacts=tuple(preacts))


@dataclass(frozen=True)
class MlpGrads:
    d_weights: tuple[np.ndarray, ...]
    d_biases: tuple[np.ndarray, ...]


def backward(tape: MlpTape, d_out: np.ndarray) -> tuple[np.ndarray, MlpGrads]:
    """Reverse pass. d_out matches the forward output shape; returns the
    cotangent of the input batch plus parameter gradients."""
    params = tape.params
    d_out = np.asarray(d_out, dtype=float)
    squeeze = d_out.ndim == 1
    delta = d_out[None, :] if squeeze else d_out
    d_weights = [None] * params.n_layers
    d_biases = [None] * params.n_layers
    last = params.n_layers - 1
    for k in range(last, -1, -1):
        if k != last:
            z = tape.preacts[k]
            delta = delta * np.where(z > 0.0, 1.0, LEAKY_SLOPE)
        h_in = tape.inputs[k]
        d_weights[k] = h_in.reshape(-1, h_in.shape[-1]).T @ delta.reshape(
            -1, delta.shape[-1]
        )
        d_biases[k] = delta.reshape(-1, delta.shape[-1]).sum(axis=0)
        delta = delta @ params.weights[k].T
    d_x = delta[0] if squeeze else delta
    return d_x, MlpGrads(d_weights=tuple(d_weights), d_biases=tuple(d_biases))


def grads_zero(params: MlpParams) -> MlpGrads:
    return MlpGrads(
        d_weights=tuple(np.zeros_like(w) for w in params.weights),
        d_biases=tuple(np.zeros_like(b) for b in params.biases),
    )


def grads_add(a: MlpGrads, b: MlpGrads) -> MlpGrads:
    return MlpGrads(
        d_weights=tuple(x + y for x, y in zip(a.d_weights, b.d_weights)),
        d_biases=tuple(x + y for x, y in zip(a.d_biases, b.d_biases)),
    )


def grads_scale(g: MlpGrads, c: float) -> MlpGrads:
    return MlpGrads(
        d_weights=tuple(c * x for x in g.d_weights),
        d_biases=tuple(c * x for x in g.d_biases),
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_weights: tuple[np.ndarray, ...] = ()
    v_weights: tuple[np.ndarray, ...] = ()
    m_biases: tuple[np.ndarray, ...] = ()
    v_biases: tuple[np.ndarray, ...] = ()


def adam_init(params: MlpParams, lr: float = 1e-4) -> AdamState:
    return AdamState(
        lr=lr,
        m_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        m_biases=tuple(np.zeros_like(b) for b in params.biases),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
    )


def adam_step(
    params: MlpParams, grads: MlpGrads, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One Adam update; returns new parameters and optimizer state."""
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t

    def update(p, g, m, v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        return p, m, v

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.d_weights, state.m_weights, state.v_weights):
        p, m, v = update(p, g, m, v)
        new_w.append(p)
        new_mw.append(m)
        new_vw.append(v)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.d_biases, state.m_biases, state.v_biases):
        p, m, v = update(p, g, m, v)
        new_b.append(p)
        new_mb.append(m)
        new_vb.append(v)
    return (
        MlpParams(weights=tuple(new_w), biases=tuple(new_b)),
        AdamState(
            lr=state.lr,
            beta1=state.beta1,
            beta2=state.beta2,
            eps=state.eps,
            step=t,
            m_weights=tuple(new_mw),
            v_weights=tuple(new_vw),
            m_biases=tuple(new_mb),
            v_biases=tuple(new_vb),
        ),
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str,
    nets: dict[str, MlpParams],
    adam: dict[str, AdamState] | None = None,
    meta: dict | None = None,
) -> None:
    """Write all named networks (and optionally optimizer state) to one
    .npz container; arrays round-trip bit-exactly."""
    arrays: dict[str, np.ndarray] = {}
    manifest: dict = {"version": CHECKPOINT_VERSION, "nets": {}, "adam": {}, "meta": meta or {}}
    for name, params in nets.items():
        manifest["nets"][name] = {"n_layers": params.n_layers, "sizes": list(params.sizes)}
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            arrays[f"{name}.w{k}"] = w
            arrays[f"{name}.b{k}"] = b
    if adam:
        for name, st in adam.items():
            manifest["adam"][name] = {
                "lr": st.lr,
                "beta1": st.beta1,
                "beta2": st.beta2,
                "eps": st.eps,
                "step": st.step,
            }
            for k in range(len(st.m_weights)):
                arrays[f"{name}.adam.mw{k}"] = st.m_weights[k]
                arrays[f"{name}.adam.vw{k}"] = st.v_weights[k]
                arrays[f"{name}.adam.mb{k}"] = st.m_biases[k]
                arrays[f"{name}.adam.vb{k}"] = st.v_biases[k]
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(
    path: str,
) -> tuple[dict[str, MlpParams], dict[str, AdamState], dict]:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        nets: dict[str, MlpParams] = {}
        for name, info in manifest["nets"].items():
            weights = tuple(data[f"{name}.w{k}"] for k in range(info["n_layers"]))
            biases = tuple(data[f"{name}.b{k}"] for k in range(info["n_layers"]))
            nets[name] = MlpParams(weights=weights, biases=biases)
        adam: dict[str, AdamState] = {}
        for name, info in manifest["adam"].items():
            n_layers = manifest["nets"][name]["n_layers"]
            adam[name] = AdamState(
                lr=info["lr"],
                beta1=info["beta1"],
                beta2=info["beta2"],
                eps=info["eps"],
                step=info["step"],
                m_weights=tuple(data[f"{name}.adam.mw{k}"] for k in range(n_layers)),
                v_weights=tuple(data[f"{name}.adam.vw{k}"] for k in range(n_layers)),
                m_biases=tuple(data[f"{name}.adam.mb{k}"] for k in range(n_layers)),
                v_biases=tuple(data[f"{name}.adam.vb{k}"] for k in range(n_layers)),
            )
    return nets, adam, manifest["meta"]
