import numpy as np
import pytest

from gmmresnext import nncore as nn
from gmmresnext.nncore import Tensor

from helpers import assert_grad_close, numerical_grad


@pytest.fixture(autouse=True)
def f64():
    with nn.default_dtype(np.float64):
        yield


def naive_conv1d(x, w, b, stride, pad, groups):
    B, cin, T = x.shape
    cout, cin_g, K = w.shape
    cout_g = cout // groups
    xp = np.zeros((B, cin, T + 2 * pad))
    xp[:, :, pad:pad + T] = x
    t_out = (T + 2 * pad - K) // stride + 1
    out = np.zeros((B, cout, t_out))
    for bi in range(B):
        for o in range(cout):
            g = o // cout_g
            for t in range(t_out):
                acc = 0.0 if b is None else b[o]
                for c in range(cin_g):
                    for k in range(K):
                        acc += w[o, c, k] * xp[bi, g * cin_g + c, t * stride + k]
                out[bi, o, t] = acc
    return out


def check_op_grads(build, inputs, label):
    """Gradient check ``sum(build(*tensors) * probe)`` for each input array."""
    rng = np.random.default_rng(0)
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    out = build(*tensors)
    probe = rng.normal(size=out.shape)
    loss = nn.reduce_sum(nn.mul(out, probe))
    loss.backward()
    for i, t in enumerate(tensors):
        def f():
            with nn.no_grad():
                return float((build(*tensors).data * probe).sum())
        num = numerical_grad(f, t.data)
        assert_grad_close(t.grad, num, label=f"{label}[{i}]")


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 7))
        w = np.eye(4)[:, :, None]
        y = nn.conv1d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(y.data, x)

    def test_impulse_response(self):
        x = np.zeros((1, 1, 9))
        x[0, 0, 4] = 1.0
        w = np.array([[[1.0, 2.0, 3.0]]])
        y = nn.conv1d(Tensor(x), Tensor(w), padding=1).data[0, 0]
        # cross-correlation: out[t] = sum_k w[k] x[t + k - 1]
        np.testing.assert_array_equal(y[3:6], [3.0, 2.0, 1.0])
        assert np.count_nonzero(y) == 3

    @pytest.mark.parametrize("stride,pad,groups,cout", [
        (1, 1, 1, 6), (2, 0, 1, 3), (1, 1, 4, 4), (1, 2, 2, 6), (3, 1, 2, 4),
    ])
    def test_matches_naive_loops(self, stride, pad, groups, cout):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 4, 8))
        w = rng.normal(size=(cout, 4 // groups, 3))
        b = rng.normal(size=cout)
        y = nn.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups)
        np.testing.assert_allclose(y.data, naive_conv1d(x, w, b, stride, pad, groups), atol=1e-6)

    def test_output_length(self):
        x = Tensor(np.zeros((1, 2, 11)))
        w = Tensor(np.zeros((2, 2, 5)))
        assert nn.conv1d(x, w, stride=3, padding=2).shape[2] == (11 + 4 - 5) // 3 + 1
        assert nn.conv1d(x, w, padding="same").shape[2] == 11

    def test_groups_equal_sharded_convs(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 10))
        w = rng.normal(size=(9, 2, 3))
        y = nn.conv1d(Tensor(x), Tensor(w), padding=1, groups=3).data
        parts = [nn.conv1d(Tensor(x[:, 2 * g:2 * g + 2]), Tensor(w[3 * g:3 * g + 3]), padding=1).data
                 for g in range(3)]
        np.testing.assert_array_equal(y, np.concatenate(parts, axis=1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.conv1d(Tensor(np.zeros((1, 4, 5))), Tensor(np.zeros((2, 3, 1))))
        with pytest.raises(ValueError):
            nn.conv1d(Tensor(np.zeros((1, 4, 5))), Tensor(np.zeros((4, 1, 2))), padding="same", groups=4)

    @pytest.mark.parametrize("groups,cout,stride", [(1, 3, 1), (4, 4, 1), (2, 4, 2)])
    def test_gradients(self, groups, cout, stride):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 4, 8))
        w = rng.normal(size=(cout, 4 // groups, 3))
        b = rng.normal(size=cout)
        check_op_grads(lambda x, w, b: nn.conv1d(x, w, b, stride=stride, padding=1, groups=groups),
                       [x, w, b], f"conv1d g={groups}")


class TestBatchNorm:
    def _state(self, C, training):
        return nn.BatchNormState(Tensor(np.ones(C), requires_grad=True), Tensor(np.zeros(C), requires_grad=True),
                                 np.zeros(C), np.ones(C), training=training)

    def test_train_mode_standardizes(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(4, 3, 9))
        y = nn.batchnorm(Tensor(x), self._state(3, True)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-5)

    def test_eval_with_batch_stats_matches_train(self):
        x = np.random.default_rng(6).normal(size=(4, 3, 9))
        train = nn.batchnorm(Tensor(x), self._state(3, True)).data
        st = self._state(3, False)
        st.running_mean[:] = x.mean(axis=(0, 2))
        st.running_var[:] = x.var(axis=(0, 2))
        np.testing.assert_allclose(nn.batchnorm(Tensor(x), st).data, train, atol=1e-5)

    def test_running_stats_update(self):
        x = np.random.default_rng(7).normal(1.0, 1.0, size=(4, 2, 5))
        st = self._state(2, True)
        nn.batchnorm(Tensor(x), st)
        np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=(0, 2)))
        assert np.all(st.running_var >= 0)

    @pytest.mark.parametrize("shape", [(3, 2, 5), (5, 3)])
    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, shape, training):
        rng = np.random.default_rng(8)
        C = shape[1]
        st = self._state(C, training)
        st.running_mean[:] = rng.normal(size=C)
        st.running_var[:] = rng.uniform(0.5, 2, size=C)
        momentum = st.momentum
        st.momentum = 0.0  # keep the finite-difference loss stationary

        def build(x, g, b):
            s = nn.BatchNormState(g, b, st.running_mean, st.running_var, momentum=0.0, training=training)
            return nn.batchnorm(x, s)
        check_op_grads(build, [rng.normal(size=shape), rng.uniform(0.5, 1.5, C), rng.normal(size=C)],
                       f"batchnorm train={training}")
        assert momentum == 0.1


class TestElementwiseGradients:
    @pytest.mark.parametrize("name,build,make", [
        ("relu", nn.relu, lambda r: [r.choice([-1, 1], size=(3, 4)) * r.uniform(0.01, 2, size=(3, 4))]),
        ("sigmoid", nn.sigmoid, lambda r: [r.normal(size=(3, 4))]),
        ("tanh", nn.tanh, lambda r: [r.normal(size=(3, 4))]),
        ("exp", nn.exp, lambda r: [r.normal(size=(3, 4))]),
        ("log", nn.log, lambda r: [r.uniform(0.5, 2, size=(3, 4))]),
        ("sqrt", nn.sqrt, lambda r: [r.uniform(0.5, 2, size=(3, 4))]),
        ("add_bcast", nn.add, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]),
        ("sub_bcast", nn.sub, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))]),
        ("mul_bcast", nn.mul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 3, 1))]),
        ("div", nn.div, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2, size=(3, 4))]),
        ("pow", lambda x: nn.power(x, 3.0), lambda r: [r.normal(size=(3, 4))]),
        ("matmul", nn.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        ("linear", nn.linear, lambda r: [r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=5)]),
        ("softmax", lambda x: nn.softmax(x, axis=1), lambda r: [r.normal(size=(3, 5))]),
        ("log_softmax", lambda x: nn.log_softmax(x, axis=0), lambda r: [r.normal(size=(3, 5))]),
        ("l2_normalize", lambda x: nn.l2_normalize(x, axis=1), lambda r: [r.normal(size=(3, 5))]),
        ("mean_t", nn.time_mean, lambda r: [r.normal(size=(2, 3, 5))]),
        ("time_stats", nn.time_stats, lambda r: [r.normal(size=(2, 3, 5))]),
        ("sum_axis", lambda x: nn.reduce_sum(x, axis=(0, 2), keepdims=True), lambda r: [r.normal(size=(2, 3, 4))]),
        ("transpose", lambda x: nn.transpose(x, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
        ("reshape", lambda x: x.reshape(6, 4), lambda r: [r.normal(size=(2, 3, 4))]),
        ("concat", lambda a, b: nn.concat_channels([a, b]), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 2, 4))]),
        ("where", lambda a, b: nn.where(np.eye(3, dtype=bool), a, b), lambda r: [r.normal(size=(3, 3)), r.normal(size=(3, 3))]),
        ("clamp_min", lambda x: nn.clamp_min(x, 0.0), lambda r: [r.choice([-1, 1], size=(3, 4)) * r.uniform(0.01, 2, size=(3, 4))]),
    ])
    def test_gradient(self, name, build, make):
        check_op_grads(build, make(np.random.default_rng(9)), name)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(10)
        labels = np.array([0, 2, 1])
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        nn.cross_entropy(logits, labels).backward()
        num = numerical_grad(lambda: nn.cross_entropy(Tensor(logits.data), labels).item(), logits.data)
        assert_grad_close(logits.grad, num, label="cross_entropy")

    def test_cross_entropy_value(self):
        logits = np.array([[1.0, 2.0, 0.5]])
        expected = -np.log(np.exp(2.0) / np.exp(logits).sum())
        assert nn.cross_entropy(Tensor(logits), [1]).item() == pytest.approx(expected, abs=1e-12)


class TestConcat:
    def test_channel_count_and_split(self):
        a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        b = Tensor(np.ones((2, 5, 4)), requires_grad=True)
        y = nn.concat_channels([a, b])
        assert y.shape == (2, 8, 4)
        g = np.arange(y.data.size, dtype=float).reshape(y.shape)
        y.backward(g)
        np.testing.assert_array_equal(a.grad, g[:, :3])
        np.testing.assert_array_equal(b.grad, g[:, 3:])

    def test_mismatched_time(self):
        with pytest.raises(ValueError):
            nn.concat_channels([Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 2, 4)))])


class TestBackward:
    def test_linear_sum(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.array([0.5, 0.1, 2.0]), requires_grad=True)
        nn.reduce_sum(w * x).backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_relu_negative(self):
        x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
        nn.reduce_sum(nn.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2).backward()

    def test_shared_subgraph_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = Tensor(np.array([-4.0]), requires_grad=True)
        nn.reduce_sum((x + y) * (x + 1.0)).backward()
        assert x.grad[0] == 1.0 and y.grad[0] == 3.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with nn.no_grad():
            y = nn.relu(x) * 2
        assert not y.requires_grad

    def test_repeat_forward_bit_identical(self):
        rng = np.random.default_rng(11)
        x, w = rng.normal(size=(2, 4, 16)), rng.normal(size=(4, 1, 3))
        a = nn.conv1d(Tensor(x), Tensor(w), padding="same", groups=4).data
        b = nn.conv1d(Tensor(x), Tensor(w), padding="same", groups=4).data
        assert a.tobytes() == b.tobytes()


class TestParamTree:
    def test_names_unique(self):
        tree = nn.ParamTree()
        tree.add("a.w", np.zeros(2))
        with pytest.raises(KeyError):
            tree.add("a.w", np.zeros(2))

    def test_freeze_and_state_roundtrip(self):
        tree = nn.ParamTree()
        tree.add("enc.w", np.ones((2, 2)))
        tree.add_batchnorm("enc.bn", 2)
        tree.add("head.w", np.ones(3))
        tree.freeze("enc.")
        assert not tree.is_trainable("enc.w") and tree.is_trainable("head.w")
        assert not tree.decays("enc.bn.gamma")
        state = tree.state_dict()
        tree["enc.w"].data[...] = 5
        tree.load_state_dict(state)
        np.testing.assert_array_equal(tree["enc.w"].data, np.ones((2, 2)))
        assert tree.count() == 4 + 4 + 3


def test_depthwise_equals_per_channel_convs():
    with nn.default_dtype(np.float64):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 5, 20))
        w = rng.normal(size=(5, 1, 3))
        y = nn.conv1d(Tensor(x), Tensor(w), padding="same", groups=5).data
        parts = [nn.conv1d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), padding="same").data for c in range(5)]
        np.testing.assert_array_equal(y, np.concatenate(parts, axis=1))
