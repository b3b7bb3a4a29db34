"""Differentiable linear time-invariant operators (rational transfer functions).

A filter with numerator ``b = [b_0, ..., b_{nb-1}]`` and denominator
``a = [a_1, ..., a_{na}]`` (leading coefficient 1 implied) maps ``u`` to

    y(t) = sum_k b_k u(t-k) - sum_j a_j y(t-j)

with zero initial conditions. Gradients use the adjoint recursion: with
``z`` the anti-causal ``1/A`` filtering of ``dL/dy``,

    dL/du(t) = sum_k b_k z(t+k)
    dL/db_k  = sum_t u(t) z(t+k)
    dL/da_j  = -sum_t y(t) z(t+j)

Kernels operate on ``(channels, T, batch)`` arrays so the innermost loop runs
over the contiguous batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .nn import Module, Parameter


@njit(cache=True, fastmath=True)
def _mimo_forward(b, a, u, y_pairs):
    n_out, n_in, nb = b.shape
    na = a.shape[2]
    T = u.shape[1]
    B = u.shape[2]
    for o in range(n_out):
        for i in range(n_in):
            for t in range(T):
                row = y_pairs[o, i, t]
                for n in range(B):
                    row[n] = 0.0
                for k in range(min(nb, t + 1)):
                    bk = b[o, i, k]
                    urow = u[i, t - k]
                    for n in range(B):
                        row[n] += bk * urow[n]
                for j in range(1, min(na, t) + 1):
                    aj = a[o, i, j - 1]
                    yrow = y_pairs[o, i, t - j]
                    for n in range(B):
                        row[n] -= aj * yrow[n]


@njit(cache=True, fastmath=True)
def _mimo_backward(b, a, u, y_pairs, g, grad_b, grad_a, grad_u):
    n_out, n_in, nb = b.shape
    na = a.shape[2]
    T = u.shape[1]
    B = u.shape[2]
    z = np.empty((T, B))
    for o in range(n_out):
        for i in range(n_in):
            for t in range(T - 1, -1, -1):
                zrow = z[t]
                grow = g[o, t]
                for n in range(B):
                    zrow[n] = grow[n]
                for j in range(1, min(na, T - 1 - t) + 1):
                    aj = a[o, i, j - 1]
                    znext = z[t + j]
                    for n in range(B):
                        zrow[n] -= aj * znext[n]
            for k in range(nb):
                bk = b[o, i, k]
                acc = 0.0
                for t in range(T - k):
                    urow = u[i, t]
                    zrow = z[t + k]
                    gu = grad_u[i, t]
                    for n in range(B):
                        acc += urow[n] * zrow[n]
                        gu[n] += bk * zrow[n]
                grad_b[o, i, k] += acc
            for j in range(1, na + 1):
                acc = 0.0
                for t in range(T - j):
                    yrow = y_pairs[o, i, t]
                    zrow = z[t + j]
                    for n in range(B):
                        acc += yrow[n] * zrow[n]
                grad_a[o, i, j - 1] -= acc


def _check_finite(values, what):
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        idx = np.unravel_index(bad[0], values.shape)
        raise ValueError(f"non-finite {what} at index {idx if len(idx) > 1 else idx[0]}")
    return values


@dataclass(frozen=True)
class TransferFunction:
    """Coefficients of one rational SISO filter ``B(q)/A(q)``."""

    b: np.ndarray
    a: np.ndarray = ()

    def __post_init__(self):
        b = _check_finite(np.atleast_1d(np.asarray(self.b, dtype=float)), "numerator coefficient")
        a = _check_finite(np.atleast_1d(np.asarray(self.a, dtype=float)), "denominator coefficient")
        if b.ndim != 1 or a.ndim != 1:
            raise ValueError("coefficients must be one-dimensional")
        if b.size < 1:
            raise ValueError("numerator needs at least one coefficient")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def n_b(self) -> int:
        return self.b.size

    @property
    def n_a(self) -> int:
        return self.a.size

    @property
    def n_params(self) -> int:
        return self.n_b + self.n_a


def _as_kernel(tf: TransferFunction):
    return tf.b.reshape(1, 1, -1), tf.a.reshape(1, 1, -1)


def siso_filter_forward(tf: TransferFunction, u) -> np.ndarray:
    u = _check_finite(np.asarray(u, dtype=float), "input sample")
    if u.ndim != 1 or u.size < 1:
        raise ValueError("input must be a non-empty 1-D series")
    b, a = _as_kernel(tf)
    y_pairs = np.empty((1, 1, u.size, 1))
    _mimo_forward(b, a, u.reshape(1, -1, 1), y_pairs)
    return y_pairs[0, 0, :, 0].copy()


def siso_filter_backward(tf: TransferFunction, u, y, grad_y):
    """Reverse-mode gradients of a scalar loss through ``y = filter(tf, u)``.

    Returns ``(grad_u, grad_b, grad_a)``.
    """
    u, y, grad_y = (np.asarray(v, dtype=float) for v in (u, y, grad_y))
    if not (u.shape == y.shape == grad_y.shape) or u.ndim != 1:
        raise ValueError(f"length mismatch: u {u.shape}, y {y.shape}, grad_y {grad_y.shape}")
    b, a = _as_kernel(tf)
    grad_b = np.zeros_like(b)
    grad_a = np.zeros_like(a)
    grad_u = np.zeros((1, u.size, 1))
    _mimo_backward(b, a, u.reshape(1, -1, 1), y.reshape(1, 1, -1, 1),
                   grad_y.reshape(1, -1, 1), grad_b, grad_a, grad_u)
    return grad_u[0, :, 0], grad_b.ravel(), grad_a.ravel()


def adjoint_filter(tf: TransferFunction, v) -> np.ndarray:
    """Transpose of the (zero-state, finite-length) filter operator."""
    return siso_filter_forward(tf, np.asarray(v, dtype=float)[::-1])[::-1]


def impulse_response(tf: TransferFunction, length: int) -> np.ndarray:
    if length < 1:
        raise ValueError("length must be >= 1")
    u = np.zeros(length)
    u[0] = 1.0
    return siso_filter_forward(tf, u)


def pole_moduli(tf: TransferFunction) -> list[float]:
    if tf.n_a == 0:
        return []
    roots = np.roots(np.concatenate([[1.0], tf.a]))
    return sorted((float(r) for r in np.abs(roots)), reverse=True)


class MimoLti(Module):
    """Grid of ``out_channels x in_channels`` SISO filters summed per output.

    Input and output are ``(batch, T, channels)``; every sequence starts from
    zero filter state.
    """

    def __init__(self, in_channels: int, out_channels: int, n_b: int = 2, n_a: int = 2,
                 rng: np.random.Generator | None = None, init_std: float = 0.01):
        if in_channels < 1 or out_channels < 1 or n_b < 1 or n_a < 0:
            raise ValueError("invalid MIMO LTI dimensions")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.n_b, self.n_a = n_b, n_a
        self.b = Parameter(rng.normal(0.0, init_std, (out_channels, in_channels, n_b)))
        self.a = Parameter(rng.normal(0.0, init_std, (out_channels, in_channels, n_a)))
        self._cache = None

    def transfer_function(self, o: int, i: int) -> TransferFunction:
        return TransferFunction(self.b.value[o, i], self.a.value[o, i])

    def pole_moduli(self) -> np.ndarray:
        """Largest pole modulus of every filter, shape ``(out, in)``."""
        out = np.zeros((self.out_channels, self.in_channels))
        if self.n_a == 0:
            return out
        for o in range(self.out_channels):
            for i in range(self.in_channels):
                out[o, i] = max(pole_moduli(self.transfer_function(o, i)))
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ValueError(f"expected (batch, T, {self.in_channels}) input, got {x.shape}")
        B, T, _ = x.shape
        u = np.ascontiguousarray(x.transpose(2, 1, 0))
        y_pairs = np.empty((self.out_channels, self.in_channels, T, B))
        _mimo_forward(self.b.value, self.a.value, u, y_pairs)
        self._cache = (u, y_pairs)
        return y_pairs.sum(axis=1).transpose(2, 1, 0).copy()

    def backward(self, grad_out):
        u, y_pairs = self._cache
        g = np.ascontiguousarray(np.asarray(grad_out, dtype=float).transpose(2, 1, 0))
        if g.shape != (self.out_channels,) + u.shape[1:]:
            raise ValueError("gradient shape does not match the last forward pass")
        grad_b = np.zeros_like(self.b.value)
        grad_a = np.zeros_like(self.a.value)
        grad_u = np.zeros_like(u)
        _mimo_backward(self.b.value, self.a.value, u, y_pairs, g, grad_b, grad_a, grad_u)
        self.b.accumulate(grad_b)
        self.a.accumulate(grad_a)
        return grad_u.transpose(2, 1, 0).copy()


def mimo_lti_forward(layer: MimoLti, U) -> np.ndarray:
    """Filter a ``(T, in)`` or ``(batch, T, in)`` multichannel series."""
    U = np.asarray(U, dtype=float)
    squeeze = U.ndim == 2
    Y = layer.forward(U[None] if squeeze else U)
    return Y[0] if squeeze else Y


def mimo_lti_backward(layer: MimoLti, U, grad_Y):
    """Gradients w.r.t. input and coefficients; returns ``(grad_U, grad_b, grad_a)``.

    Runs a fresh forward pass so the result does not depend on layer state.
    Coefficient gradients are also accumulated into the layer parameters.
    """
    U = np.asarray(U, dtype=float)
    grad_Y = np.asarray(grad_Y, dtype=float)
    squeeze = U.ndim == 2
    if squeeze:
        U, grad_Y = U[None], grad_Y[None]
    layer.forward(U)
    gb0, ga0 = layer.b.grad.copy(), layer.a.grad.copy()
    grad_U = layer.backward(grad_Y)
    grad_b, grad_a = layer.b.grad - gb0, layer.a.grad - ga0
    return (grad_U[0] if squeeze else grad_U), grad_b, grad_a
