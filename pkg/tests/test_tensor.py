import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fino import tensor as T
from fino.tensor import Tensor

from conftest import fd_grad, naive_conv2d, rel_err


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- conv2d ----------------------------------------------------------------

def test_conv_scaling_identity():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.array([[[[2.0]]]]), np.array([0.0]), padding=0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_single_tap():
    out = T.conv2d(np.array([[[[5.0]]]]), np.ones((1, 1, 3, 3)), np.array([1.0]), padding=1)
    np.testing.assert_array_equal(out.data, [[[[6.0]]]])


@pytest.mark.parametrize("c_in,c_out", [(2, 3), (3, 2), (4, 4)])
def test_conv_matches_naive_loops(rng, c_in, c_out):
    x = rng.standard_normal((1, c_in, 4, 4))
    w = rng.standard_normal((c_out, c_in, 3, 3))
    b = rng.standard_normal(c_out)
    out = T.conv2d(x, w, b, padding=1)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("c_in,c_out", [(2, 3), (3, 2), (3, 3)])
def test_conv_gradients(rng, c_in, c_out):
    x = leaf(rng.standard_normal((2, c_in, 4, 5)))
    w = leaf(rng.standard_normal((c_out, c_in, 3, 3)))
    b = leaf(rng.standard_normal(c_out))
    probe = rng.standard_normal((2, c_out, 4, 5))

    def f():
        return float(np.sum(naive_conv2d(x.data, w.data, b.data, 1) * probe))

    T.sum_(T.mul(T.conv2d(x, w, b, 1), Tensor(probe))).backward()
    for t in (x, w, b):
        assert rel_err(t.grad, fd_grad(f, t.data)) < 1e-7


def test_conv_rejects_mismatch_naming_dimension():
    with pytest.raises(ValueError, match="dim 1"):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1), padding=1)
    with pytest.raises(ValueError, match="padding"):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), padding=0)
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1), padding=0)


# -- elementwise -----------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])


def test_mul_values():
    np.testing.assert_array_equal(T.elementwise("mul", [2.0, 3.0], [4.0, 5.0]).data, [8, 15])


def test_exp_gradient_at_zero():
    x = leaf([0.0])
    T.sum_(T.exp(x)).backward()
    fd = (np.exp(1e-6) - np.exp(-1e-6)) / 2e-6
    assert abs(x.grad[0] - 1.0) < 1e-8
    assert abs(x.grad[0] - fd) < 1e-8


def test_no_broadcasting():
    with pytest.raises(ValueError, match="shape mismatch"):
        T.add(np.zeros((2, 3)), np.zeros((2, 1)))


def test_div_rejects_tiny_divisor():
    with pytest.raises(ZeroDivisionError, match="index"):
        T.div([1.0, 2.0], [1.0, 1e-13])


def test_exp_overflow_is_rejected():
    with pytest.raises(FloatingPointError):
        T.exp([1000.0])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_gradients(rng, kind):
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    probe = rng.standard_normal((3, 4))
    fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[kind]
    T.sum_(T.mul(T.elementwise(kind, a, b), Tensor(probe))).backward()
    for t in (a, b):
        num = fd_grad(lambda: float(np.sum(fn(a.data, b.data) * probe)), t.data)
        assert rel_err(t.grad, num) < 1e-5


@pytest.mark.parametrize("kind,fn", [
    ("relu", lambda v: np.maximum(v, 0)),
    ("exp", np.exp),
    ("neg", np.negative),
    ("abs", np.abs),
    ("tanh", np.tanh),
    ("square", np.square),
])
def test_unary_gradients(rng, kind, fn):
    # keep away from the kinks of relu/abs
    x = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    a = leaf(x)
    probe = rng.standard_normal((3, 4))
    T.sum_(T.mul(T.elementwise(kind, a), Tensor(probe))).backward()
    num = fd_grad(lambda: float(np.sum(fn(a.data) * probe)), a.data)
    assert rel_err(a.grad, num) < 1e-5


# -- reductions ------------------------------------------------------------

def test_l1_mean():
    assert T.reduce("l1_mean", [1.0, -1.0, 2.0, 0.0]).item() == 1.0


def test_frobenius_sq():
    assert T.reduce("frobenius_sq", [[1.0, 2.0], [2.0, 4.0]]).item() == 25.0


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_reduce_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        T.reduce("mean", np.zeros((0,)))


@pytest.mark.parametrize("kind,fn", [
    ("sum", np.sum),
    ("mean", np.mean),
    ("l1_mean", lambda v: np.mean(np.abs(v))),
    ("frobenius_sq", lambda v: np.sum(v * v)),
])
def test_reduction_gradients(rng, kind, fn):
    x = rng.uniform(0.2, 1.0, size=(3, 5)) * rng.choice([-1.0, 1.0], size=(3, 5))
    a = leaf(x)
    T.reduce(kind, a).backward()
    assert rel_err(a.grad, fd_grad(lambda: float(fn(a.data)), a.data)) < 1e-5


# -- split / concat --------------------------------------------------------

def test_split_shapes():
    head, tail = T.channel_split(np.zeros((2, 4, 3, 3)), 3)
    assert head.shape == (2, 3, 3, 3) and tail.shape == (2, 1, 3, 3)


@given(arrays(np.float64, (2, 5, 3, 2), elements=st.floats(-1e6, 1e6)), st.integers(1, 4))
def test_concat_of_split_is_bit_exact(a, at):
    head, tail = T.channel_split(a, at)
    assert np.array_equal(T.channel_concat([head, tail]).data, a)


def test_split_rejects_out_of_range():
    with pytest.raises(ValueError):
        T.channel_split(np.zeros((1, 4, 2, 2)), 4)
    with pytest.raises(ValueError):
        T.channel_split(np.zeros((1, 4, 2, 2)), 0)


def test_concat_gradient_scatters_unchanged(rng):
    a = leaf(rng.standard_normal((1, 2, 2, 2)))
    b = leaf(rng.standard_normal((1, 3, 2, 2)))
    probe = rng.standard_normal((1, 5, 2, 2))
    T.sum_(T.mul(T.channel_concat([a, b]), Tensor(probe))).backward()
    np.testing.assert_array_equal(a.grad, probe[:, :2])
    np.testing.assert_array_equal(b.grad, probe[:, 2:])


def test_split_gradient_routes_to_slices(rng):
    a = leaf(rng.standard_normal((2, 4, 2, 2)))
    head, tail = T.channel_split(a, 1)
    T.add(T.sum_(head), T.scale(T.sum_(tail), 3.0)).backward()
    assert np.all(a.grad[:, :1] == 1.0) and np.all(a.grad[:, 1:] == 3.0)


def test_batch_split_concat_roundtrip(rng):
    a = rng.standard_normal((5, 2, 2, 2))
    parts = T.batch_split(a, [2, 1, 2])
    assert [p.shape[0] for p in parts] == [2, 1, 2]
    assert np.array_equal(T.batch_concat(parts).data, a)


# -- backward --------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.sum_(T.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates():
    x = leaf([1.0, 2.0])
    T.sum_(T.square(x)).backward()
    T.sum_(T.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.square(leaf([1.0, 2.0])).backward()


def test_unused_parameter_has_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    loss = T.add(T.sum_(T.square(x)), T.scale(T.sum_(unused), 0.0))
    loss.backward()
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_shared_subexpression_gradient():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.sum_(T.add(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_deep_graph_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    T.sum_(y).backward()
    assert x.grad[0] == 1.0


def test_no_grad_skips_tape():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


def test_matmul_and_gather_gradients(rng):
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4, 2)))
    idx = np.array([[0, 5, 5], [11, 2, 0]])
    probe = rng.standard_normal((3, 2))
    T.sum_(T.mul(T.matmul(a, b), Tensor(probe))).backward()
    assert rel_err(a.grad, fd_grad(lambda: float(np.sum((a.data @ b.data) * probe)), a.data)) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda: float(np.sum((a.data @ b.data) * probe)), b.data)) < 1e-6
    c = leaf(rng.standard_normal((3, 4)))
    p2 = rng.standard_normal(idx.shape)
    T.sum_(T.mul(T.gather(c, idx), Tensor(p2))).backward()
    num = fd_grad(lambda: float(np.sum(c.data.reshape(-1)[idx] * p2)), c.data)
    assert rel_err(c.grad, num) < 1e-6


def test_float32_is_preserved():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    y = T.relu(T.conv2d(x, w, b, 1))
    T.sum_(y).backward()
    assert y.dtype == np.float32 and w.grad.dtype == np.float32


def test_determinism(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    first = T.conv2d(x, w, b, 1).data
    second = T.conv2d(x, w, b, 1).data
    assert np.array_equal(first, second)


# -- raw tensor dump -------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_raw_roundtrip(rng, dtype):
    a = rng.standard_normal((2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    T.write_raw(buf, a)
    raw = buf.getvalue()
    assert raw[:4] == b"FNT1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert raw[20] == (0 if dtype == np.float64 else 1)
    buf.seek(0)
    b = T.read_raw(buf)
    assert b.dtype == dtype and np.array_equal(a, b)


def test_raw_rejects_truncation(rng):
    buf = io.BytesIO()
    T.write_raw(buf, rng.standard_normal(10))
    with pytest.raises(ValueError, match="truncated payload at byte"):
        T.read_raw(io.BytesIO(buf.getvalue()[:-3]))
    with pytest.raises(ValueError, match="bad magic"):
        T.read_raw(io.BytesIO(b"XXXX" + buf.getvalue()[4:]))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(2, 5), st.integers(2, 5)),
              elements=st.floats(-2, 2)))
def test_ops_finite_for_finite_inputs(a):
    w = np.full((2, a.shape[1], 3, 3), 0.1)
    out = T.tanh(T.relu(T.conv2d(a, w, np.zeros(2), 1)))
    assert np.all(np.isfinite(out.data))
