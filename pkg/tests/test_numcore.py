import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bttf import numcore as nc
from bttf.errors import ContractError, NumericError, ShapeError


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nc.matmul(nc.Tensor(np.eye(3)), nc.Tensor(m)).data, m)


def test_matmul_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    out = nc.matmul(nc.Tensor(a), nc.Tensor(b)).data
    assert np.array_equal(out, [[3.0], [7.0]])
    assert np.array_equal(out, loop_matmul(a, b))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_matches_loop_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_grad_is_ones_times_bt():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = nc.Tensor(A, requires_grad=True)
    nc.backward(nc.sum_all(nc.matmul(a, nc.Tensor(B))))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ B.T, atol=1e-12)
    err = nc.grad_check(lambda x: nc.sum_all(nc.matmul(x, nc.Tensor(B))), A)
    assert err < 1e-9


def test_softmax_rows_examples():
    out = nc.softmax_rows(nc.Tensor([[0.0, 0.0]])).data
    np.testing.assert_allclose(out[0], [0.5, 0.5])
    r = nc.softmax_rows(nc.Tensor([[math.log(1), math.log(2), math.log(3)]])).data[0]
    np.testing.assert_allclose(r, [1 / 6, 1 / 3, 1 / 2], atol=1e-15)
    big = nc.softmax_rows(nc.Tensor([[1e9, 0.0]])).data[0]
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-300)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        nc.softmax_rows(nc.Tensor([[np.nan, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_stochastic(m):
    out = nc.softmax_rows(nc.Tensor(m)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_backward_square():
    x = nc.Tensor(3.0, requires_grad=True)
    nc.backward(x * x)
    assert x.grad == 6.0


def test_backward_non_scalar_rejected():
    x = nc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nc.backward(x * 2.0)


def test_disconnected_parameter_gets_zero():
    x = nc.Tensor(2.0, requires_grad=True)
    y = nc.Tensor(5.0, requires_grad=True)
    nc.backward(x * x)
    assert y.grad is None or y.grad == 0.0
    assert nc.grad_check(lambda t: nc.sum_all(nc.Tensor(np.ones(2)) * 3.0), np.ones(2)) == 0.0


def test_backward_twice_is_deterministic():
    rng = np.random.default_rng(3)
    w = nc.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = nc.Tensor(rng.normal(size=(2, 4)))
    loss = nc.mean(nc.square(nc.relu(nc.matmul(x, w))))
    nc.backward(loss)
    g1 = w.grad.copy()
    nc.zero_grad([w])
    nc.backward(loss)
    assert np.array_equal(g1, w.grad)


def test_grad_check_linear_and_eps():
    c = np.array([1.5, -2.0, 0.25])
    assert nc.grad_check(lambda x: nc.sum_all(x * nc.Tensor(c)), np.ones(3)) < 1e-9
    with pytest.raises(ContractError):
        nc.grad_check(lambda x: nc.sum_all(x), np.ones(3), eps=0.0)


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(7)
    onehot = np.eye(4)[rng.permutation(4)]

    def f(z):
        p = nc.softmax_rows(z)
        # cross-entropy through a log-free surrogate: -sum(onehot * p) + sum(p^2)
        return nc.sum_all(nc.square(p)) - nc.sum_all(p * nc.Tensor(onehot))

    assert nc.grad_check(f, rng.normal(size=(4, 4))) < 1e-4


OPS = {
    "mul": lambda x: nc.sum_all(x * x * 0.5),
    "relu": lambda x: nc.sum_all(nc.square(nc.relu(x))),
    "softmax": lambda x: nc.sum_all(nc.square(nc.softmax(x, axis=-1))),
    "layer_norm": lambda x: nc.sum_all(nc.square(nc.layer_norm(x, nc.Tensor(np.linspace(0.5, 1.5, 3)),
                                                                nc.Tensor(np.zeros(3))) * np.arange(3.0))),
    "transpose": lambda x: nc.sum_all(nc.square(nc.transpose(x, (1, 0))) * np.arange(6.0).reshape(3, 2)),
    "take_last": lambda x: nc.sum_all(nc.square(nc.take_last(x, axis=0))),
    "absolute": lambda x: nc.mean(nc.absolute(x)),
    "broadcast_add": lambda x: nc.sum_all(nc.square(x + nc.Tensor(np.ones(3)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(2, 3))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from kinks
        assert nc.grad_check(OPS[name], x) < 1e-4, (name, seed)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    new, _ = nc.adam_step(p, [np.zeros(2)], nc.AdamState())
    assert np.array_equal(new[0], p[0])


def test_adam_first_step_is_lr_sign():
    p = [np.zeros(3)]
    g = [np.array([0.3, -5.0, 1e-3])]
    new, state = nc.adam_step(p, g, nc.AdamState(), lr=1e-3)
    m_hat = 0.1 * g[0] / 0.1
    v_hat = 0.001 * g[0] ** 2 / 0.001
    np.testing.assert_allclose(new[0], -1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new[0], -1e-3 * np.sign(g[0]), rtol=1e-4)
    assert state.step == 1


def test_adam_constant_gradient_moves_against_sign():
    p, state = [np.array([0.0, 0.0])], nc.AdamState()
    for _ in range(50):
        p, state = nc.adam_step(p, [np.array([2.0, -1.0])], state)
    assert p[0][0] < 0 < p[0][1]


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nc.adam_step([np.zeros(2)], [np.zeros(3)], nc.AdamState())


def test_rng_streams_reproducible_and_distinct():
    a = nc.make_rng(5, 1).random(4)
    assert np.array_equal(a, nc.make_rng(5, 1).random(4))
    assert not np.array_equal(a, nc.make_rng(5, 2).random(4))


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c": np.zeros((0, 2))}
    path = tmp_path / "x.bin"
    nc.write_container(path, {"tag": "t"}, tensors)
    manifest, back = nc.read_container(path)
    assert manifest["tag"] == "t"
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_tensor_bytes_are_little_endian():
    buf = nc.tensor_to_bytes(np.array([1.0]))
    assert buf.endswith(np.array([1.0], dtype="<f8").tobytes())
