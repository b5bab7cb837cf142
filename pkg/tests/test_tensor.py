"""Gradient checks for every autograd primitive against fp64 finite differences.

The oracles below re-implement each forward in plain float64 numpy and never
touch the library's backward pass, so the two routes are independent.
"""

import math

import numpy as np
import pytest

from flowedit import tensor as T
from flowedit.errors import GradientError, NonFiniteError, ShapeError

RNG_SEED = 20240


def fd_grad(f, args, i, h=1e-5):
    """Central finite differences of scalar f wrt args[i], all in fp64."""
    x = args[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(*args)
        x[idx] = orig - h
        fm = f(*args)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(analytic, fd):
    return np.abs(analytic.astype(np.float64) - fd).max() / (np.abs(fd).max() + 1e-8)


def _gelu64(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _softmax64(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _layernorm64(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# Each case: (name, tensor-op building a scalar loss, independent fp64 loss, #inputs, shapes)
def _weighted(out64, w):
    return float((out64 * w).sum())


CASES = {
    "add": (
        lambda xs, w: T.mean(T.add(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] + xs[1], w),
        [(3, 4), (3, 4)],
    ),
    "add_broadcast": (
        lambda xs, w: T.mean(T.add(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] + xs[1], w),
        [(2, 3, 4), (4,)],
    ),
    "sub": (
        lambda xs, w: T.mean(T.sub(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] - xs[1], w),
        [(3, 4), (3, 4)],
    ),
    "mul": (
        lambda xs, w: T.mean(T.mul(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] * xs[1], w),
        [(3, 4), (3, 4)],
    ),
    "scale": (
        lambda xs, w: T.mean(T.scale(xs[0], 1.7) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(1.7 * xs[0], w),
        [(5, 2)],
    ),
    "matmul": (
        lambda xs, w: T.mean(T.matmul(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] @ xs[1], w),
        [(3, 4), (4, 2)],
    ),
    "matmul_batched": (
        lambda xs, w: T.mean(T.matmul(xs[0], xs[1]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0] @ xs[1], w),
        [(2, 3, 4), (4, 2)],
    ),
    "transpose": (
        lambda xs, w: T.mean(T.transpose(xs[0], (1, 0)) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0].T, w),
        [(3, 4)],
    ),
    "reshape": (
        lambda xs, w: T.mean(T.reshape(xs[0], (2, 6)) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0].reshape(2, 6), w),
        [(3, 4)],
    ),
    "concat": (
        lambda xs, w: T.mean(T.concat([xs[0], xs[1]], axis=1) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(np.concatenate([xs[0], xs[1]], axis=1), w),
        [(3, 2), (3, 3)],
    ),
    "narrow": (
        lambda xs, w: T.mean(T.narrow(xs[0], 1, 1, 2) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0][:, 1:3], w),
        [(3, 5)],
    ),
    "softmax": (
        lambda xs, w: T.mean(T.softmax(xs[0], axis=-1) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(_softmax64(xs[0], -1), w),
        [(4, 6)],
    ),
    "layer_norm": (
        lambda xs, w: T.mean(T.layer_norm(xs[0]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(_layernorm64(xs[0]), w),
        [(4, 8)],
    ),
    "gelu": (
        lambda xs, w: T.mean(T.gelu(xs[0]) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(_gelu64(xs[0]), w),
        [(4, 5)],
    ),
    "mean": (
        lambda xs, w: T.mean(xs[0]) * float(w.flat[0]),
        lambda xs, w: float(xs[0].mean() * w.flat[0]),
        [(4, 5)],
    ),
    "mean_axis": (
        lambda xs, w: T.mean(T.mean(xs[0], axis=1) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0].mean(axis=1), w),
        [(4, 5)],
    ),
    "sum_of_squares": (
        lambda xs, w: T.sum_of_squares(xs[0]) * float(w.flat[0]),
        lambda xs, w: float((xs[0] ** 2).sum() * w.flat[0]),
        [(4, 3)],
    ),
    "take": (
        lambda xs, w: T.mean(T.take(xs[0], np.array([[0, 2], [2, 1]])) * Tconst(w)) * w.size,
        lambda xs, w: _weighted(xs[0][np.array([[0, 2], [2, 1]])], w),
        [(4, 3)],
    ),
}


def Tconst(arr):
    return T.Tensor(arr.astype(np.float32))


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    build, oracle, shapes = CASES[name]
    rng = np.random.default_rng(RNG_SEED + hash(name) % 1000)
    for case in range(20):
        xs64 = [rng.normal(size=s) * 0.8 for s in shapes]
        out_shape = _op_output_shape(name, xs64)
        w = rng.normal(size=out_shape)

        ts = [T.Tensor(x.astype(np.float32), requires_grad=True) for x in xs64]
        loss = build(ts, w)
        T.backward(loss)

        def f64(*args):
            return oracle(list(args), w)

        for i in range(len(xs64)):
            fd = fd_grad(f64, [x.copy() for x in xs64], i)
            assert rel_err(ts[i].grad, fd) < 1e-3, f"{name} case {case} input {i}"


def _op_output_shape(name, xs64):
    if name in ("add", "add_broadcast", "sub", "mul"):
        return np.broadcast_shapes(*[x.shape for x in xs64])
    if name in ("scale", "gelu", "softmax", "layer_norm"):
        return xs64[0].shape
    if name in ("matmul", "matmul_batched"):
        return (np.zeros(xs64[0].shape) @ np.zeros(xs64[1].shape)).shape
    if name == "transpose":
        return xs64[0].T.shape
    if name == "reshape":
        return (2, 6)
    if name == "concat":
        return (xs64[0].shape[0], xs64[0].shape[1] + xs64[1].shape[1])
    if name == "narrow":
        return (xs64[0].shape[0], 2)
    if name == "mean_axis":
        return (xs64[0].shape[0],)
    if name in ("mean", "sum_of_squares"):
        return (1,)
    if name == "take":
        return (2, 2, xs64[0].shape[1])
    raise KeyError(name)


def test_two_layer_network_gradient_matches_finite_differences():
    """End-to-end check against an independent fp64 re-implementation of a 2-layer MLP loss."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 3))
    w1, b1 = rng.normal(size=(3, 8)) * 0.5, rng.normal(size=(8,)) * 0.1
    w2, b2 = rng.normal(size=(8, 2)) * 0.5, rng.normal(size=(2,)) * 0.1
    target = rng.normal(size=(5, 2))

    def loss64(w1_, b1_, w2_, b2_):
        h = _gelu64(x @ w1_ + b1_)
        out = h @ w2_ + b2_
        return float(((out - target) ** 2).sum() / 5.0)

    tw1 = T.Tensor(w1.astype(np.float32), requires_grad=True)
    tb1 = T.Tensor(b1.astype(np.float32), requires_grad=True)
    tw2 = T.Tensor(w2.astype(np.float32), requires_grad=True)
    tb2 = T.Tensor(b2.astype(np.float32), requires_grad=True)
    h = T.gelu(T.add(T.matmul(Tconst(x), tw1), tb1))
    out = T.add(T.matmul(h, tw2), tb2)
    loss = T.scale(T.sum_of_squares(T.sub(out, Tconst(target))), 1.0 / 5.0)
    T.backward(loss)

    params64 = [w1.copy(), b1.copy(), w2.copy(), b2.copy()]
    grads = [tw1.grad, tb1.grad, tw2.grad, tb2.grad]
    for i in range(4):
        fd = fd_grad(lambda *a: loss64(*a), [p.copy() for p in params64], i, h=1e-3)
        assert rel_err(grads[i], fd) < 1e-3


class TestContracts:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 7)).astype(np.float32)
        out = T.matmul(Tconst(np.eye(3, dtype=np.float32)), Tconst(a))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_of_equal_row_is_uniform(self):
        row = T.Tensor(np.full((1, 8), 3.25, dtype=np.float32))
        out = T.softmax(row, axis=-1)
        np.testing.assert_allclose(out.data, 1.0 / 8.0, rtol=0, atol=1e-7)

    def test_layer_norm_row_stats(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(6, 16)).astype(np.float32) * 2 + 1)
        y = T.layer_norm(x).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-5
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4

    def test_sum_of_squares_gradient(self):
        x = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        T.backward(T.sum_of_squares(x))
        np.testing.assert_array_equal(x.grad, np.array([2.0, 4.0], dtype=np.float32))

    def test_untouched_parameter_gets_exact_zero(self):
        p = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        q = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        T.backward(T.sum_of_squares(q))
        np.testing.assert_array_equal(p.grad, np.zeros(3, dtype=np.float32))

    def test_backward_on_nonscalar_raises(self):
        x = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(GradientError):
            T.backward(T.add(x, x))

    def test_backward_on_gradfree_graph_raises(self):
        x = T.Tensor(np.ones(3, dtype=np.float32))
        loss = T.sum_of_squares(x)
        with pytest.raises(GradientError):
            T.backward(loss)

    def test_backward_twice_raises(self):
        x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        loss = T.sum_of_squares(x)
        T.backward(loss)
        with pytest.raises(GradientError):
            T.backward(loss)

    def test_gradient_accumulates_across_backwards(self):
        x = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        T.backward(T.sum_of_squares(x))
        T.backward(T.sum_of_squares(x))
        np.testing.assert_array_equal(x.grad, np.array([4.0, 8.0], dtype=np.float32))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(Tconst(np.ones((2, 3))), Tconst(np.ones((2, 3))))

    def test_non_finite_detection(self):
        with pytest.raises(NonFiniteError):
            T.Tensor(np.array([1.0, np.nan], dtype=np.float32))

    def test_no_grad_blocks_recording(self):
        x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with T.no_grad():
            loss = T.sum_of_squares(x)
        assert not loss.requires_grad

    def test_tape_topological_order(self):
        x = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = T.matmul(x, x)
        z = T.sum_of_squares(T.add(y, x))
        tape = T.GradTape.trace(z)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_forward_determinism(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(8, 8)).astype(np.float32)
        b = rng.normal(size=(8, 8)).astype(np.float32)
        r1 = T.gelu(T.matmul(Tconst(a), Tconst(b))).data
        r2 = T.gelu(T.matmul(Tconst(a), Tconst(b))).data
        np.testing.assert_array_equal(r1, r2)
