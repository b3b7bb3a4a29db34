"""Small hand-written training stack: parameters, dense/recurrent layers, loss, Adam.

Every layer works on arrays whose last axis is the feature axis, so the same
layer serves single vectors, ``(batch, features)`` and ``(batch, T, features)``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

WEIGHTS_MAGIC = b"FJWT\x01\n"


class Parameter:
    def __init__(self, value, trainable: bool = True):
        self.value = np.array(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.populated = False

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        self.grad += g
        self.populated = True

    def zero_grad(self):
        self.grad[...] = 0.0
        self.populated = False


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, attr in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(attr, Parameter):
                yield prefix + name, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for k, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def count_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.trainable = flag

    def architecture(self) -> dict:
        return {"kind": type(self).__name__}

    def __call__(self, x):
        return self.forward(x)


class Dense(Module):
    """``y = x W^T + bias`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)))
        self.bias = Parameter(rng.uniform(-bound, bound, n_out))
        self._x = None

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense layer expects width {self.n_in}, got {x.shape[-1]}")
        flat = x.reshape(-1, self.n_in) @ self.weight.value.T
        flat += self.bias.value
        return flat.reshape(x.shape[:-1] + (self.n_out,))

    def grad(self, x, g):
        """Accumulate parameter gradients for input ``x``; return ``dL/dx``."""
        x2 = x.reshape(-1, self.n_in)
        g2 = g.reshape(-1, self.n_out)
        self.weight.accumulate(g2.T @ x2)
        self.bias.accumulate(g2.sum(axis=0))
        return (g2 @ self.weight.value).reshape(g.shape[:-1] + (self.n_in,))

    def forward(self, x):
        self._x = np.asarray(x, dtype=float)
        return self.apply(self._x)

    def backward(self, g):
        return self.grad(self._x, np.asarray(g, dtype=float))


def dense_forward(layer: Dense, x):
    return layer.apply(x)


def relu(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def relu_grad(x, g):
    """Subgradient 0 at exactly 0."""
    return np.where(np.asarray(x) > 0.0, g, 0.0)


class MLP(Module):
    """Dense stack with ReLU between layers (none after the last one)."""

    def __init__(self, widths, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        self.layers = [Dense(a, b, rng) for a, b in zip(self.widths[:-1], self.widths[1:])]
        self._pre = None

    def apply(self, x):
        h = np.asarray(x, dtype=float)
        for k, layer in enumerate(self.layers):
            h = layer.apply(h)
            if k < len(self.layers) - 1:
                h = relu(h)
        return h

    def forward(self, x):
        inputs, pre = [], []
        h = np.asarray(x, dtype=float)
        for k, layer in enumerate(self.layers):
            inputs.append(h)
            h = layer.apply(h)
            if k < len(self.layers) - 1:
                pre.append(h)
                h = relu(h)
        self._pre = (inputs, pre)
        return h

    def backward(self, g):
        inputs, pre = self._pre
        g = np.asarray(g, dtype=float)
        for k in range(len(self.layers) - 1, -1, -1):
            if k < len(self.layers) - 1:
                g = relu_grad(pre[k], g)
            g = self.layers[k].grad(inputs[k], g)
        return g


class RnnCell(Module):
    """Two-path recurrent cell driven by ``[x, h]``.

    Main path ``(n_in+h) -> 64 -> 32 -> n_out``; hidden path ``(n_in+h) -> 32 -> h``.
    The new hidden state is the linear output of the hidden path.
    """

    def __init__(self, n_in: int, n_out: int, n_hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.n_hidden = n_in, n_out, n_hidden
        self.main = MLP((n_in + n_hidden, 64, 32, n_out), rng)
        self.hidden = MLP((n_in + n_hidden, 32, n_hidden), rng)

    def step(self, x, h):
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise ValueError(f"rnn cell expects widths ({self.n_in}, {self.n_hidden}), "
                             f"got ({x.shape[-1]}, {h.shape[-1]})")
        xh = np.concatenate([x, h], axis=-1)
        return self.main.apply(xh), self.hidden.apply(xh)

    def forward_sequence(self, x):
        """Unroll over ``(batch, T, n_in)`` from a zero hidden state."""
        B, T, _ = x.shape
        h = np.zeros((B, self.n_hidden))
        ys, caches = [], []
        for t in range(T):
            xh = np.concatenate([x[:, t], h], axis=-1)
            y = self.main.forward(xh)
            h_new = self.hidden.forward(xh)
            caches.append((self.main._pre, self.hidden._pre))
            ys.append(y)
            h = h_new
        self._caches = caches
        return np.stack(ys, axis=1)

    def backward_sequence(self, g):
        B, T, _ = g.shape
        gx = np.zeros((B, T, self.n_in))
        gh = np.zeros((B, self.n_hidden))
        for t in range(T - 1, -1, -1):
            self.main._pre, self.hidden._pre = self._caches[t]
            gxh = self.main.backward(g[:, t]) + self.hidden.backward(gh)
            gx[:, t] = gxh[:, : self.n_in]
            gh = gxh[:, self.n_in:]
        return gx


def rnn_step(cell: RnnCell, x, h):
    """One recurrent step; returns ``(output, new_hidden)``."""
    return cell.step(x, h)


def mse_l2_loss(pred, target, params=(), lam: float = 0.0):
    """Mean squared residual plus ``lam * sum ||p||^2`` over trainable params.

    Returns ``(loss, dloss/dpred)``. The L2 gradient is left to the optimizer.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    r = pred - target
    loss = float(np.mean(r * r))
    if lam:
        loss += lam * float(sum(np.sum(p.value * p.value) for p in params if p.trainable))
    return loss, 2.0 * r / r.size


class Adam:
    """Adam with bias correction; the L2 term contributes ``2*l2*p`` to the gradient."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, l2: float = 0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.l2 = lr, beta1, beta2, eps, l2
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        live = [p for p in self.params if p.trainable]
        if not any(p.populated for p in live):
            raise RuntimeError("adam step called before any gradient was accumulated")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.trainable:
                g = p.grad + 2.0 * self.l2 * p.value if self.l2 else p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_update(state: Adam, params=None):
    state.step()
    return state.params if params is None else params


def parameter_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def architecture_fingerprint(model: Module) -> str:
    shapes = [[name, list(p.shape)] for name, p in model.named_parameters()]
    return hashlib.sha256(_canonical({"architecture": model.architecture(),
                                      "shapes": shapes}).encode()).hexdigest()


def save_weights(model: Module, path, seed: int | None = None, metadata: dict | None = None) -> Path:
    """Write ``magic | u64 header length | JSON header | <f8 payload``."""
    named = list(model.named_parameters())
    header = {
        "format": "flexjoint-weights",
        "version": 1,
        "architecture": model.architecture(),
        "fingerprint": architecture_fingerprint(model),
        "parameters": [{"name": n, "shape": list(p.shape), "trainable": p.trainable} for n, p in named],
        "seed": seed,
        "metadata": metadata or {},
    }
    blob = _canonical(header).encode()
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for _, p in named)
    path = Path(path)
    path.write_bytes(WEIGHTS_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)
    return path


def read_weights(path):
    """Return ``(header, {name: array})`` from a weight file."""
    data = Path(path).read_bytes()
    if not data.startswith(WEIGHTS_MAGIC):
        raise ValueError(f"{path}: not a flexjoint weight file")
    off = len(WEIGHTS_MAGIC)
    (n,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    header = json.loads(data[off:off + n].decode())
    off += n
    arrays = {}
    for entry in header["parameters"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(entry["shape"]).copy()
        off += 8 * size
    if off != len(data):
        raise ValueError(f"{path}: payload size does not match the shape table")
    return header, arrays


def load_into(model: Module, path) -> dict:
    """Copy weights from ``path`` into an already-built ``model``; returns the header."""
    header, arrays = read_weights(path)
    expected = architecture_fingerprint(model)
    if header["fingerprint"] != expected:
        raise ValueError(f"architecture fingerprint mismatch: file {header['fingerprint']} "
                         f"vs model {expected}")
    for name, p in model.named_parameters():
        p.value[...] = arrays[name]
    return header
