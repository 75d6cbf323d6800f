"""Tensor engine: forward oracles, finite-difference gradients, tape rules."""

import numpy as np
import pytest

import sgdvit.tensor as T
from sgdvit.errors import ShapeError, StateError
from sgdvit.optim import SGD
from sgdvit.tensor import GradTape, Tensor, flop_scope


def finite_diff(f, arrays, index, h=1e-4):
    """Central finite differences of scalar f w.r.t. arrays[index] (f64)."""
    base = [a.astype(np.float64).copy() for a in arrays]
    grad = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = base[index][ix]
        base[index][ix] = orig + h
        fp = f(*base)
        base[index][ix] = orig - h
        fm = f(*base)
        base[index][ix] = orig
        grad[ix] = (fp - fm) / (2 * h)
        it.iternext()
    return grad


def check_grads(build, arrays, rtol=1e-5):
    """Compare tape gradients against finite differences in f64."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with GradTape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    for i, t in enumerate(tensors):
        fd = finite_diff(lambda *arrs: float(np.asarray(
            _forward_value(build, arrs)).reshape(-1)[0]), arrays, i)
        denom = np.maximum(np.abs(fd), 1.0)
        rel = np.abs(t.grad - fd) / denom
        assert rel.max() < rtol, f"input {i}: max rel err {rel.max():.2e}"


def _forward_value(build, arrays):
    outs = build(*[Tensor(a, dtype=np.float64) for a in arrays])
    return outs.data


class TestForwardOracles:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, Tensor(np.eye(2)))
        np.testing.assert_allclose(out.data, [[1, 2], [3, 4]])

    def test_matmul_vs_numpy_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m, k, n = rng.integers(1, 6, size=3)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
            np.testing.assert_allclose(out.data, a @ b, atol=1e-12)

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), rtol=1e-6)

    def test_softmax_rows_normalize(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(scale=3.0, size=(1, 7))
        out = T.softmax(Tensor(logits))
        assert abs(out.data.sum() - 1.0) < 1e-6

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


class TestShapeRoundTrips:
    def test_reshape_transpose_roundtrip_bit_exact(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4)).astype(np.float32)
        t = Tensor(x)
        back = T.transpose(T.transpose(t, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x)
        again = T.reshape(T.reshape(t, (6, 4)), (2, 3, 4))
        assert np.array_equal(again.data, x)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 3)).astype(np.float32)
        b = rng.normal(size=(4, 3)).astype(np.float32)
        cat = T.concat([Tensor(a), Tensor(b)], axis=0)
        assert np.array_equal(cat.data[:2], a)
        assert np.array_equal(cat.data[2:], b)

    def test_concat_backward_distributes_without_loss(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 3)).astype(np.float64)
        b = rng.normal(size=(3, 3)).astype(np.float64)
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with GradTape() as tape:
            cat = T.concat([ta, tb], axis=0)
            loss = T.sum_(cat * cat)
        tape.backward(loss)
        np.testing.assert_allclose(ta.grad, 2 * a)
        np.testing.assert_allclose(tb.grad, 2 * b)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
        with GradTape() as tape:
            loss = T.sum_(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=x.data.dtype))

    def test_quadratic_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.sum_(x * x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape() as tape:
            y = x * 2.0
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_detached_tensor_is_constant(self):
        x = Tensor([2.0], requires_grad=True)
        with GradTape() as tape:
            d = (x * 3.0).detach()
            loss = T.sum_(x * d)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])  # d treated as the constant 6

    def test_tape_single_use(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.sum_(x * x)
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)

    def test_mlp_grad_matches_finite_difference(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 5))
        w1 = rng.normal(size=(5, 7)) * 0.5
        w2 = rng.normal(size=(7, 3)) * 0.5
        w3 = rng.normal(size=(3, 1)) * 0.5

        def build(tx, tw1, tw2, tw3):
            h1 = T.relu(T.matmul(tx, tw1))
            h2 = T.relu(T.matmul(h1, tw2))
            return T.sum_(T.matmul(h2, tw3))

        check_grads(build, [x, w1, w2, w3], rtol=1e-5)

    @pytest.mark.parametrize("op,shapes", [
        ("add", [(3, 4), (3, 4)]),
        ("mul", [(2, 3), (2, 3)]),
        ("div", [(4,), (4,)]),
        ("exp", [(2, 2)]),
        ("log", [(3,)]),
        ("softmax", [(3, 5)]),
        ("sigmoid", [(2, 4)]),
        ("softplus", [(5,)]),
        ("mean", [(3, 4)]),
        ("maximum", [(4,), (4,)]),
        ("broadcast", [(1, 4)]),
    ])
    def test_elementwise_grads(self, op, shapes):
        rng = np.random.default_rng(hash(op) % 2**31)
        arrays = [rng.uniform(0.5, 2.0, size=s) for s in shapes]

        builders = {
            "add": lambda a, b: T.sum_((a + b) * (a + b)),
            "mul": lambda a, b: T.sum_(a * b * a),
            "div": lambda a, b: T.sum_(a / b),
            "exp": lambda a: T.sum_(T.exp(a)),
            "log": lambda a: T.sum_(T.log(a)),
            "softmax": lambda a: T.sum_(T.softmax(a) * T.softmax(a)),
            "sigmoid": lambda a: T.sum_(T.sigmoid(a) * a),
            "softplus": lambda a: T.sum_(T.softplus(a)),
            "mean": lambda a: T.mean(a * a),
            "maximum": lambda a, b: T.sum_(T.maximum(a * 1.5, b)),
            "broadcast": lambda a: T.sum_(T.broadcast_to(a, (3, 4)) * 2.0),
        }
        check_grads(builders[op], arrays, rtol=1e-5)

    def test_slice_transpose_concat_grads(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 5))

        def build(t):
            a = t[:2, 1:4]
            b = T.transpose(t[2:, 1:4])
            cat = T.concat([a, T.transpose(b)], axis=0)
            return T.sum_(cat * cat) + T.sum_(a * a) + T.sum_(b * 3.0)

        check_grads(build, [x], rtol=1e-5)

    def test_randomized_rank4_grads(self):
        rng = np.random.default_rng(9)
        for trial in range(3):
            shape = tuple(rng.integers(1, 4, size=4))
            x = rng.normal(size=shape)

            def build(t):
                y = T.relu(t * 2.0 + 0.3)
                z = T.mean(y, axis=(1, 3))
                return T.sum_(z * z)

            check_grads(build, [x], rtol=1e-5)


class TestSgd:
    def test_plain_step(self):
        p = Tensor([5.0], requires_grad=True, name="p")
        p.grad = np.array([2.0], dtype=np.float32)
        SGD([p], lr=1.0, momentum=0.0).step()
        np.testing.assert_allclose(p.data, [3.0])

    def test_momentum_two_steps(self):
        # constant grad 1, momentum .5, lr 1: p = 0 -1 -2.5
        p = Tensor([0.0], requires_grad=True, name="p")
        opt = SGD([p], lr=1.0, momentum=0.5)
        for _ in range(2):
            p.grad = np.array([1.0], dtype=np.float32)
            opt.step()
        np.testing.assert_allclose(p.data, [-2.5])

    def test_zero_lr_keeps_param(self):
        p = Tensor([1.25], requires_grad=True, name="p")
        p.grad = np.array([7.0], dtype=np.float32)
        SGD([p], lr=0.0).step()
        np.testing.assert_allclose(p.data, [1.25])

    def test_missing_grad_names_param(self):
        p = Tensor([1.0], requires_grad=True, name="theta")
        with pytest.raises(StateError, match="theta"):
            SGD([p], lr=0.1).step()

    def test_grads_cleared_after_step(self):
        p = Tensor([1.0], requires_grad=True, name="p")
        p.grad = np.array([1.0], dtype=np.float32)
        opt = SGD([p], lr=0.1)
        opt.step()
        assert p.grad is None


class TestFlopCounter:
    def test_matmul_macs(self):
        with flop_scope() as rep:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))
        assert rep.get("matmul") == 24

    def test_attention_qk_macs(self):
        from sgdvit.nn import scaled_dot_attention
        rng = np.random.default_rng(10)
        q = Tensor(rng.normal(size=(10, 8)).astype(np.float32))
        k = Tensor(rng.normal(size=(20, 8)).astype(np.float32))
        v = Tensor(rng.normal(size=(20, 8)).astype(np.float32))
        with flop_scope() as rep:
            scaled_dot_attention(q, k, v)
        assert rep.get("attn_qk") == 10 * 20 * 8

    def test_empty_scope_zero(self):
        with flop_scope() as rep:
            pass
        assert rep.total == 0

    def test_nested_scope_sums_into_parent(self):
        a = Tensor(np.zeros((2, 2)))
        with flop_scope() as outer:
            T.matmul(a, a)
            with flop_scope() as inner:
                T.matmul(a, a)
        assert inner.get("matmul") == 8
        assert outer.get("matmul") == 16

    def test_lifo_violation(self):
        r1 = T.begin_flop_scope()
        r2 = T.begin_flop_scope()
        with pytest.raises(StateError):
            T.end_flop_scope(r1)
        T.end_flop_scope(r2)
        T.end_flop_scope(r1)


class TestSpatialOps:
    def test_conv_identity_1x1(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 5, 5)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w), None)
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_conv_box_sum(self):
        x = np.ones((1, 5, 5), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), None, padding=1)
        assert out.data[0, 2, 2] == pytest.approx(9.0)

    def test_conv_too_small_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None)

    def test_maxpool_forward_and_grad(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        t = Tensor(x, requires_grad=True)
        with GradTape() as tape:
            y = T.max_pool2d(t, 2, 2)
            loss = T.sum_(y)
        assert np.array_equal(y.data[0], [[5, 7], [13, 15]])
        tape.backward(loss)
        expected = np.zeros((1, 4, 4))
        expected[0][np.ix_([1, 3], [1, 3])] = 1.0
        np.testing.assert_array_equal(t.grad, expected)

    def test_conv_grad_finite_difference(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.3
        b = rng.normal(size=(3,)) * 0.1

        def build(tx, tw, tb):
            return T.sum_(T.relu(T.conv2d(tx, tw, tb, stride=2, padding=1)))

        check_grads(build, [x, w, b], rtol=1e-5)

    def test_conv_transpose_grad_finite_difference(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 3, 3))
        w = rng.normal(size=(2, 3, 3, 3)) * 0.3
        b = rng.normal(size=(3,)) * 0.1

        def build(tx, tw, tb):
            y = T.conv_transpose2d(tx, tw, tb, stride=1, padding=1)
            return T.sum_(y * y)

        check_grads(build, [x, w, b], rtol=1e-5)

    def test_conv_transpose_inverts_conv_shape(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(4, 9, 9)).astype(np.float32))
        w1 = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        w2 = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        down = T.conv2d(x, w1, None, padding=1)
        up = T.conv_transpose2d(down, w2, None, padding=1)
        assert up.shape == x.shape

    def test_xcorr_grad_finite_difference(self):
        rng = np.random.default_rng(15)
        s = rng.normal(size=(2, 6, 6))
        t = rng.normal(size=(2, 3, 3))

        def build(ts, tt):
            return T.sum_(T.depthwise_xcorr(ts, tt))

        check_grads(build, [s, t], rtol=1e-5)

    def test_scatter_tokens_tiles_and_grads(self):
        tokens = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0],
                           [5.0, 50.0]])
        fps = [(0, 2, 0, 2), (0, 2, 2, 4), (2, 4, 0, 2), (2, 3, 2, 4), (3, 4, 2, 4)]
        t = Tensor(tokens, requires_grad=True, dtype=np.float64)
        with GradTape() as tape:
            grid = T.scatter_tokens(t, fps, 4)
            loss = T.sum_(grid)
        assert grid.shape == (2, 4, 4)
        assert grid.data[0, 0, 0] == 1.0 and grid.data[1, 3, 3] == 50.0
        tape.backward(loss)
        areas = np.array([4, 4, 4, 2, 2], dtype=np.float64)
        np.testing.assert_allclose(t.grad, np.stack([areas, areas], axis=1))

    def test_scatter_tokens_rejects_overlap(self):
        tokens = np.zeros((2, 3))
        with pytest.raises(ShapeError):
            T.scatter_tokens(Tensor(tokens), [(0, 2, 0, 2), (1, 2, 0, 2)], 2)
