"""Forward-inference network, dynoNet-style Wiener-Hammerstein branches and baselines.

All models map ``(batch, T, 6N)`` Eq.-1 style inputs
``[theta(t), theta_dot(t), theta_ddot(t), theta(t+1), theta_dot(t+1), theta_ddot(t+1)]``
to ``(batch, T, 2N)`` outputs ``[positions, velocities]``.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .lti import MimoLti
from .nn import MLP, Module, RnnCell
from .trajectory import Trajectory

FIN_HIDDEN = (64, 32)
DWH_HIDDEN = 32
LTI_ORDER = (2, 2)  # (n_b, n_a)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class FinModel(Module):
    """Pointwise one-step forward-dynamics predictor ``6N -> 64 -> 32 -> 2N``."""

    def __init__(self, n_joints: int, seed=0):
        self.n_joints = n_joints
        self.net = MLP((6 * n_joints, *FIN_HIDDEN, 2 * n_joints), _rng(seed))

    def architecture(self):
        return {"kind": "fin", "n_joints": self.n_joints, "widths": list(self.net.widths)}

    def apply(self, x):
        return self.net.apply(x)

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, g):
        return self.net.backward(g)


class FcModel(FinModel):
    """Pointwise inverse-dynamics baseline with the same widths as the FIN."""

    def architecture(self):
        return {"kind": "fc", "n_joints": self.n_joints, "widths": list(self.net.widths)}


class DwhBranch(Module):
    """LTI(in -> 2N) -> Dense(2N -> 32) -> ReLU -> Dense(32 -> N) -> LTI(N -> N)."""

    def __init__(self, n_in: int, n_joints: int, rng):
        n_b, n_a = LTI_ORDER
        self.lti_in = MimoLti(n_in, 2 * n_joints, n_b, n_a, rng)
        self.static = MLP((2 * n_joints, DWH_HIDDEN, n_joints), rng)
        self.lti_out = MimoLti(n_joints, n_joints, n_b, n_a, rng)

    def forward(self, x):
        return self.lti_out.forward(self.static.forward(self.lti_in.forward(x)))

    def backward(self, g):
        return self.lti_in.backward(self.static.backward(self.lti_out.backward(g)))

    def lti_layers(self):
        return [self.lti_in, self.lti_out]


class DwhModel(Module):
    """Two independent branches: one emits positions, the other velocities."""

    def __init__(self, n_joints: int, n_in: int | None = None, seed=0):
        rng = _rng(seed)
        self.n_joints = n_joints
        self.n_in = 6 * n_joints if n_in is None else n_in
        self.position = DwhBranch(self.n_in, n_joints, rng)
        self.velocity = DwhBranch(self.n_in, n_joints, rng)

    def architecture(self):
        return {"kind": "dwh", "n_joints": self.n_joints, "n_in": self.n_in,
                "lti_order": list(LTI_ORDER), "hidden": DWH_HIDDEN}

    def forward(self, x):
        return np.concatenate([self.position.forward(x), self.velocity.forward(x)], axis=-1)

    def backward(self, g):
        n = self.n_joints
        return self.position.backward(g[..., :n]) + self.velocity.backward(g[..., n:])

    def lti_layers(self):
        return self.position.lti_layers() + self.velocity.lti_layers()


class FinDwhModel(Module):
    """Frozen FIN whose prediction is appended to the input of a DWH pair."""

    def __init__(self, n_joints: int, fin: FinModel | None = None, seed=0):
        rng = _rng(seed)
        self.n_joints = n_joints
        self.fin = fin if fin is not None else FinModel(n_joints, rng)
        if self.fin.n_joints != n_joints:
            raise ValueError("FIN joint count does not match")
        self.fin.set_trainable(False)
        self.dwh = DwhModel(n_joints, 8 * n_joints, rng)

    def architecture(self):
        return {"kind": "fin-dwh", "n_joints": self.n_joints, "fin": self.fin.architecture(),
                "dwh": self.dwh.architecture()}

    def augment(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, self.fin.apply(x)], axis=-1)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return self.dwh.forward(np.concatenate([x, self.fin.forward(x)], axis=-1))

    def backward(self, g):
        n6 = 6 * self.n_joints
        gin = self.dwh.backward(g)
        return gin[..., :n6] + self.fin.backward(gin[..., n6:])

    def lti_layers(self):
        return self.dwh.lti_layers()


class RnnModel(Module):
    """Recurrent baseline unrolled over each sequence from a zero hidden state."""

    def __init__(self, n_joints: int, n_hidden: int = 14, seed=0):
        self.n_joints, self.n_hidden = n_joints, n_hidden
        self.cell = RnnCell(6 * n_joints, 2 * n_joints, n_hidden, _rng(seed))

    def architecture(self):
        return {"kind": "rnn", "n_joints": self.n_joints, "n_hidden": self.n_hidden}

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 2
        y = self.cell.forward_sequence(x[None] if squeeze else x)
        return y[0] if squeeze else y

    def backward(self, g):
        return self.cell.backward_sequence(g)


def build_fin(n_joints: int, seed=0) -> FinModel:
    return FinModel(n_joints, seed)


def build_dwh(n_joints: int, augmented: bool = False, seed=0) -> DwhModel:
    return DwhModel(n_joints, (8 if augmented else 6) * n_joints, seed)


def build_fin_dwh(n_joints: int, fin_weights=None, seed=0) -> FinDwhModel:
    """``fin_weights``: a FinModel, a weight-file path, or None (untrained FIN)."""
    if fin_weights is None or isinstance(fin_weights, FinModel):
        fin = fin_weights
    else:
        fin = FinModel(n_joints)
        nn.load_into(fin, fin_weights)
    return FinDwhModel(n_joints, fin, seed)


def build_fc_baseline(n_joints: int, seed=0) -> FcModel:
    return FcModel(n_joints, seed)


def build_rnn_baseline(n_joints: int, n_hidden: int = 14, seed=0) -> RnnModel:
    return RnnModel(n_joints, n_hidden, seed)


BUILDERS = {
    "fin": lambda n, seed=0: build_fin(n, seed),
    "fc": lambda n, seed=0: build_fc_baseline(n, seed),
    "dwh": lambda n, seed=0: build_dwh(n, False, seed),
    "fin-dwh": lambda n, seed=0: build_fin_dwh(n, None, seed),
    "rnn": lambda n, seed=0: build_rnn_baseline(n, 14, seed),
}


def count_parameters(model: Module) -> int:
    return model.count_parameters()


def expected_fin_count(n_joints: int) -> int:
    n = n_joints
    return 6 * n * 64 + 64 + 64 * 32 + 32 + 32 * 2 * n + 2 * n


def expected_branch_count(n_in: int, n_joints: int) -> int:
    n_b, n_a = LTI_ORDER
    n = n_joints
    return (n_in * 2 * n * (n_b + n_a) + (2 * n * DWH_HIDDEN + DWH_HIDDEN)
            + (DWH_HIDDEN * n + n) + n * n * (n_b + n_a))


def model_from_architecture(arch: dict) -> Module:
    kind = arch["kind"]
    n = arch["n_joints"]
    if kind == "fin":
        return FinModel(n)
    if kind == "fc":
        return FcModel(n)
    if kind == "dwh":
        return DwhModel(n, arch["n_in"])
    if kind == "fin-dwh":
        return FinDwhModel(n)
    if kind == "rnn":
        return RnnModel(n, arch["n_hidden"])
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path) -> Module:
    header, _ = nn.read_weights(path)
    model = model_from_architecture(header["architecture"])
    nn.load_into(model, path)
    if isinstance(model, FinDwhModel):
        model.fin.set_trainable(False)
    return model


def model_inputs(traj: Trajectory) -> np.ndarray:
    """``(T-1, 6N)`` rows ``[state(t), state(t+1)]`` for t = 0..T-2."""
    if len(traj) < 2:
        raise ValueError("trajectory needs at least 2 points")
    if traj.accelerations is None:
        raise ValueError("trajectory accelerations are missing")
    s = traj.states()
    return np.hstack([s[:-1], s[1:]])


def fin_forward(fin: FinModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 6 * fin.n_joints:
        raise ValueError(f"FIN expects width {6 * fin.n_joints}, got {x.shape[-1]}")
    return fin.apply(x)


def sequence_forward(model: Module, desired: Trajectory) -> np.ndarray:
    """Run any inverse model over one trajectory; returns ``(T-1, 2N)`` commands for t = 1..T-1."""
    x = model_inputs(desired)[None]
    if isinstance(model, FinDwhModel):
        return model.dwh.forward(model.augment(x))[0]
    if isinstance(model, FcModel):
        return model.apply(x)[0]
    return model.forward(x)[0]


def fin_dwh_forward(model: FinDwhModel, desired: Trajectory) -> Trajectory:
    """Feed-forward commands ``[theta_f(t+1), theta_dot_f(t+1)]`` for t = 0..T-2."""
    out = sequence_forward(model, desired)
    n = model.n_joints
    return Trajectory(out[:, :n], out[:, n:], None, desired.dt)
