import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexjoint import nn
from flexjoint.nn import MLP, Adam, Dense, Parameter, RnnCell, mse_l2_loss, relu, relu_grad


def numeric_grad(f, arr, eps=1e-6):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        hi = f()
        arr[idx] = old - eps
        lo = f()
        arr[idx] = old
        out[idx] = (hi - lo) / (2 * eps)
    return out


def close(a, b, rtol=1e-4):
    np.testing.assert_allclose(a, b, rtol=rtol, atol=rtol * max(np.abs(b).max(), 1e-8))


def test_dense_zero_and_identity():
    d = Dense(3, 3)
    d.weight.value[...] = 0
    d.bias.value[...] = 0
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert not d.apply(x).any()
    d.weight.value[...] = np.eye(3)
    np.testing.assert_array_equal(d.apply(x), x)


def test_dense_gradients():
    rng = np.random.default_rng(1)
    d = Dense(4, 3, rng)
    x = rng.normal(size=(2, 5, 4))
    w = rng.normal(size=(2, 5, 3))
    loss = lambda: float(np.sum(d.apply(x) * w))
    d.forward(x)
    gx = d.backward(w)
    close(gx, numeric_grad(loss, x))
    close(d.weight.grad, numeric_grad(loss, d.weight.value))
    close(d.bias.grad, numeric_grad(loss, d.bias.value))


def test_relu_examples():
    np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]), [0, 0, 2])
    assert not relu(-np.ones(5)).any()
    np.testing.assert_array_equal(relu_grad(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_relu_gradient_matches_fd_away_from_zero():
    x = np.array([-2.0, -0.3, 0.4, 1.5])
    g = numeric_grad(lambda: float(relu(x).sum()), x)
    np.testing.assert_allclose(relu_grad(x, np.ones(4)), g, atol=1e-8)


def test_mlp_gradients():
    rng = np.random.default_rng(2)
    m = MLP((5, 7, 4, 2), rng)
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(6, 2))
    loss = lambda: float(np.sum(m.apply(x) * w))
    m.forward(x)
    gx = m.backward(w)
    close(gx, numeric_grad(loss, x))
    for p in m.parameters():
        close(p.grad, numeric_grad(loss, p.value))


def test_rnn_zero_weights():
    cell = RnnCell(3, 2, 4)
    for p in cell.parameters():
        p.value[...] = 0
    y, h = cell.step(np.ones((1, 3)), np.zeros((1, 4)))
    assert not y.any() and not h.any()


def test_rnn_sequence_gradients():
    rng = np.random.default_rng(3)
    cell = RnnCell(3, 2, 4, rng)
    x = rng.normal(size=(2, 6, 3))
    w = rng.normal(size=(2, 6, 2))
    loss = lambda: float(np.sum(cell.forward_sequence(x) * w))
    cell.forward_sequence(x)
    gx = cell.backward_sequence(w)
    close(gx, numeric_grad(loss, x))
    for p in cell.parameters():
        close(p.grad, numeric_grad(loss, p.value))


def test_loss_value_and_gradient():
    p = Parameter(np.array([1.0, 2.0]))
    pred = np.array([[1.0, 2.0]])
    target = np.array([[0.0, 0.0]])
    loss, g = mse_l2_loss(pred, target, [p], 0.1)
    assert loss == pytest.approx(2.5 + 0.1 * 5)
    np.testing.assert_allclose(g, [[1.0, 2.0]])
    frozen = Parameter(np.array([10.0]), trainable=False)
    assert mse_l2_loss(pred, target, [frozen], 0.1)[0] == pytest.approx(2.5)


def test_adam_first_step_is_lr_sized():
    p = Parameter(np.array([1.0, -1.0]))
    opt = Adam([p], lr=0.01)
    p.accumulate(np.array([3.0, -0.5]))
    opt.step()
    np.testing.assert_allclose(p.value, [0.99, -0.99], rtol=1e-6)


def test_adam_requires_gradient():
    opt = Adam([Parameter(np.zeros(2))])
    with pytest.raises(RuntimeError):
        opt.step()


def test_adam_skips_frozen_but_clears_grad():
    live, frozen = Parameter(np.ones(2)), Parameter(np.ones(2), trainable=False)
    opt = Adam([live, frozen], lr=0.1)
    live.accumulate(np.ones(2))
    frozen.accumulate(np.ones(2))
    opt.step()
    np.testing.assert_array_equal(frozen.value, 1.0)
    assert not frozen.grad.any()
    assert np.all(live.value < 1.0)


def test_adam_memorizes_single_sample():
    rng = np.random.default_rng(4)
    m = MLP((4, 16, 2), rng)
    x, y = rng.normal(size=(1, 4)), rng.normal(size=(1, 2))
    opt = Adam(m.parameters(), lr=1e-2)
    for _ in range(2000):
        loss, g = mse_l2_loss(m.forward(x), y, m.parameters(), 0.0)
        m.backward(g)
        opt.step()
    assert loss < 1e-6


@settings(max_examples=25, deadline=None)
@given(widths=st.lists(st.integers(1, 9), min_size=2, max_size=4), seed=st.integers(0, 10**6))
def test_weight_round_trip_bit_exact(tmp_path_factory, widths, seed):
    m = MLP(widths, np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("w") / "m.fjw"
    nn.save_weights(m, path, seed=seed, metadata={"note": "x"})
    m2 = MLP(widths, np.random.default_rng(seed + 1))
    header = nn.load_into(m2, path)
    assert header["seed"] == seed
    for a, b in zip(m.parameters(), m2.parameters()):
        assert a.value.tobytes() == b.value.tobytes()


def test_weight_fingerprint_mismatch(tmp_path):
    path = tmp_path / "m.fjw"
    nn.save_weights(MLP((3, 4, 2)), path)
    with pytest.raises(ValueError, match="fingerprint mismatch"):
        nn.load_into(MLP((3, 5, 2)), path)


def test_weight_file_layout(tmp_path):
    path = tmp_path / "m.fjw"
    m = MLP((2, 3))
    nn.save_weights(m, path)
    raw = path.read_bytes()
    assert raw.startswith(nn.WEIGHTS_MAGIC)
    header, arrays = nn.read_weights(path)
    assert [e["shape"] for e in header["parameters"]] == [[3, 2], [3]]
    (n_header,) = struct.unpack("<Q", raw[len(nn.WEIGHTS_MAGIC):len(nn.WEIGHTS_MAGIC) + 8])
    payload = raw[len(nn.WEIGHTS_MAGIC) + 8 + n_header:]
    assert len(payload) == 8 * m.count_parameters()
    np.testing.assert_array_equal(np.frombuffer(payload[:48], "<f8").reshape(3, 2), arrays["layers.0.weight"])


def test_parameter_digest_changes():
    p = Parameter(np.zeros(3))
    d0 = nn.parameter_digest([p])
    p.value[1] = 1e-300
    assert nn.parameter_digest([p]) != d0
