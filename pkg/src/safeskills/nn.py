"""Dense networks with hand-written reverse mode, Adam/SGD and checkpoints.

Everything is float64. Inputs may be a single vector or a batch (rows).
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"SSKCKPT\x00"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "radial_tanh", "identity")


class StaleTapeError(RuntimeError):
    """A tape was used with a network other than the one (or version) that produced it."""


class TrainingError(RuntimeError):
    """Non-finite values reached the parameters or losses."""


class CheckpointError(ValueError):
    pass


class DenseNet:
    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 activations: Sequence[str]):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input {w.shape[0]} != previous output "
                                 f"{weights[i - 1].shape[1]}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self.version = 0

    @classmethod
    def create(cls, sizes: Sequence[int], activations: Sequence[str],
               rng: np.random.Generator, final_scale: float | None = None) -> "DenseNet":
        """Fan-in uniform init (+-1/sqrt(fan_in)); optionally a small final layer."""
        ws, bs = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = 1.0 / np.sqrt(n_in)
            if final_scale is not None and i == len(sizes) - 2:
                lim = final_scale
            ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            bs.append(rng.uniform(-lim, lim, size=n_out))
        return cls(ws, bs, activations)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.activations)

    def same_architecture(self, other: "DenseNet") -> bool:
        return self.sizes == other.sizes and self.activations == other.activations

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class GradientTape:
    net_id: int
    version: int
    single: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def _radial_gain(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row z: s = tanh(|z|)/|z| and (ds/dn)/n with n = |z| (series near 0)."""
    n = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    small = n < 1e-4
    safe = np.where(small, 1.0, n)
    t = np.tanh(safe)
    s = np.where(small, 1.0 - n * n / 3.0, t / safe)
    ds = np.where(small, -2.0 / 3.0 + 8.0 / 15.0 * n * n, ((1.0 - t * t) * safe - t) / safe ** 3)
    return s, ds


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "radial_tanh":
        # Squashes the vector length with tanh and keeps its direction, so a
        # saturated output can still turn.
        return _radial_gain(z)[0] * z
    return z


def forward(net: DenseNet, x) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.sizes[0]:
        raise ValueError(f"input width {h.shape[1]} != network input {net.sizes[0]}")
    tape = GradientTape(id(net), net.version, single)
    for w, b, act in zip(net.weights, net.biases, net.activations):
        tape.inputs.append(h)
        z = h @ w + b
        tape.pre.append(z)
        h = _act(act, z)
        tape.outputs.append(h)
    return (h[0] if single else h), tape


def backward(net: DenseNet, tape: GradientTape, output_gradient
             ) -> tuple[list[np.ndarray], np.ndarray]:
    """Return parameter gradients (ordered like ``net.params()``) and the input gradient.

    Gradients are summed over the batch.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTapeError("tape does not belong to the current network parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    grads: list[np.ndarray] = []
    for i in reversed(range(len(net.weights))):
        act = net.activations[i]
        if act == "relu":
            g = g * (tape.pre[i] > 0.0)
        elif act == "tanh":
            g = g * (1.0 - tape.outputs[i] ** 2)
        elif act == "radial_tanh":
            z = tape.pre[i]
            gain, dgain = _radial_gain(z)
            g = gain * g + dgain * np.sum(z * g, axis=-1, keepdims=True) * z
        grads.append(g.sum(axis=0))
        grads.append(tape.inputs[i].T @ g)
        g = g @ net.weights[i].T
    grads.reverse()
    return grads, (g[0] if tape.single else g)


class SGD:
    def __init__(self, lr: float):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for p, g in zip(params, grads):
            p -= self.lr * g

    def state_dict(self) -> tuple[dict[str, Any], list[np.ndarray]]:
        return {"type": "sgd", "lr": self.lr, "t": self.t}, []


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> tuple[dict[str, Any], list[np.ndarray]]:
        meta = {"type": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}
        arrays = [] if self.m is None else list(self.m) + list(self.v)
        return meta, arrays


def apply_gradients(net: DenseNet, gradients: list[np.ndarray], optimizer) -> DenseNet:
    params = net.params()
    if len(gradients) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(gradients)}")
    for p, g in zip(params, gradients):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    optimizer.step(params, gradients)
    net.version += 1
    return net


def soft_update(target: DenseNet, source: DenseNet, tau: float) -> DenseNet:
    """Polyak averaging in place: target <- tau*source + (1-tau)*target."""
    if not target.same_architecture(source):
        raise ValueError("soft_update needs identical architectures")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for t, s in zip(target.params(), source.params()):
        if tau == 1.0:
            t[...] = s
        else:
            t *= 1.0 - tau
            t += tau * s
    target.version += 1
    return target


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    net: DenseNet
    optimizer: Adam | SGD | None
    rng_state: dict | None
    meta: dict


def _jsonable_state(state):
    return json.loads(json.dumps(state))


def save_checkpoint(path: str | Path, net: DenseNet, optimizer=None,
                    rng: np.random.Generator | None = None, meta: dict | None = None) -> None:
    """Magic + u32 header length + JSON header + raw little-endian float64 arrays.

    Written to a temp file and renamed into place.
    """
    arrays = [("param", a) for a in net.params()]
    opt_meta = None
    if optimizer is not None:
        opt_meta, opt_arrays = optimizer.state_dict()
        arrays += [("opt", a) for a in opt_arrays]
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "architecture": {"sizes": net.sizes, "activations": net.activations},
        "arrays": [{"group": g, "shape": list(a.shape)} for g, a in arrays],
        "optimizer": opt_meta,
        "rng_state": _jsonable_state(rng.bit_generator.state) if rng is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint schema_version "
                              f"{header.get('schema_version')} != {CHECKPOINT_VERSION}")
    offset = 12 + hlen
    params, opt_arrays = [], []
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
        (params if spec["group"] == "param" else opt_arrays).append(arr)
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    arch = header["architecture"]
    net = DenseNet(params[0::2], params[1::2], arch["activations"])
    if net.sizes != arch["sizes"]:
        raise CheckpointError(f"{path}: architecture mismatch")
    optimizer = None
    om = header["optimizer"]
    if om is not None:
        if om["type"] == "adam":
            optimizer = Adam(om["lr"], om["beta1"], om["beta2"], om["eps"])
            optimizer.t = om["t"]
            if opt_arrays:
                half = len(opt_arrays) // 2
                optimizer.m, optimizer.v = opt_arrays[:half], opt_arrays[half:]
        else:
            optimizer = SGD(om["lr"])
            optimizer.t = om["t"]
    return Checkpoint(net, optimizer, header["rng_state"], header["meta"])


def restore_rng(state: dict) -> np.random.Generator:
    bits = getattr(np.random, state["bit_generator"])()
    bits.state = state
    return np.random.Generator(bits)
