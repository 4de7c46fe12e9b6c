import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iqt.errors import ConfigError, DataError, ShapeError
from iqt.nn import (
    Graph,
    ParamStore,
    Tensor,
    adam_step,
    add,
    batchnorm,
    concat,
    conv3d,
    deconv3d,
    glorot_normal_init,
    learning_rate,
    maxpool3d,
    mean,
    mse_loss,
    no_grad,
    relu,
    square,
)
from iqt.nn.optim import glorot_fans


def naive_conv(x, w, b):
    n, C, X, Y, Z = x.shape
    F, _, kx, ky, kz = w.shape
    xp = np.pad(x, [(0, 0), (0, 0), (kx // 2,) * 2, (ky // 2,) * 2, (kz // 2,) * 2])
    out = np.zeros((n, F, X, Y, Z))
    for i, f, a, c, d in itertools.product(range(n), range(F), range(X), range(Y), range(Z)):
        out[i, f, a, c, d] = np.sum(xp[i, :, a:a + kx, c:c + ky, d:d + kz] * w[f]) + b[f]
    return out


def naive_strided_conv(y, w, stride):
    """Correlation of y with w (C,F,*stride) at stride = kernel: the adjoint of deconv."""
    n, F, X, Y, Z = y.shape
    C = w.shape[0]
    sx, sy, sz = stride
    out = np.zeros((n, C, X // sx, Y // sy, Z // sz))
    for i, c, a, bb, d in itertools.product(range(n), range(C), *[range(s) for s in out.shape[2:]]):
        out[i, c, a, bb, d] = np.sum(y[i, :, a * sx:(a + 1) * sx, bb * sy:(bb + 1) * sy, d * sz:(d + 1) * sz] * w[c])
    return out


def central_diff_check(build, arrays, h, rng, per_tensor=6):
    """Largest relative error between backprop and central differences at sampled coordinates."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*ts).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        coords = list(itertools.product(*[range(s) for s in a.shape]))
        picks = coords if len(coords) <= per_tensor else [coords[j] for j in rng.choice(len(coords), per_tensor, replace=False)]
        for idx in picks:
            ap = [q.copy() for q in arrays]
            am = [q.copy() for q in arrays]
            ap[i][idx] += h
            am[i][idx] -= h
            with no_grad():
                fd = (float(build(*map(Tensor, ap)).data) - float(build(*map(Tensor, am)).data)) / (2 * h)
            g = ts[i].grad[idx]
            worst = max(worst, abs(fd - g) / max(1e-10, abs(fd) + abs(g)))
    return worst


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 4, 4, 4))
        w = np.zeros((3, 3, 1, 1, 1))
        w[range(3), range(3)] = 1.0
        out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_same_padding_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 16, 32, 32, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(16, 16, 3, 3, 3)).astype(np.float32))
        assert conv3d(x, w, Tensor(np.zeros(16, np.float32))).shape == (1, 16, 32, 32, 8)

    @pytest.mark.parametrize("kshape", [(3, 3, 3), (3, 1, 5), (1, 1, 1)])
    def test_matches_naive(self, rng, kshape):
        x = rng.normal(size=(2, 3, 5, 5, 5))
        w = rng.normal(size=(4, 3) + kshape)
        b = rng.normal(size=4)
        assert np.max(np.abs(conv3d(Tensor(x), Tensor(w), Tensor(b)).data - naive_conv(x, w, b))) < 1e-10

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 3, 4, 3, 5))
        tgt = rng.normal(size=(2, 2, 4, 3, 5))
        err = central_diff_check(lambda x, w, b: mse_loss(conv3d(x, w, b), tgt),
                                 [x, rng.normal(size=(2, 3, 3, 3, 3)), rng.normal(size=2)], 1e-5, rng)
        assert err < 1e-6

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))


class TestMaxPool:
    def test_paper_shape(self):
        assert maxpool3d(Tensor(np.zeros((1, 1, 32, 32, 8))), (2, 2, 1)).shape == (1, 1, 16, 16, 8)

    def test_constant(self):
        out = maxpool3d(Tensor(np.full((1, 2, 4, 4, 4), 3.0)))
        assert np.all(out.data == 3.0)

    def test_window_max_oracle(self, rng):
        x = rng.normal(size=(2, 3, 8, 8, 8))
        out = maxpool3d(Tensor(x)).data
        assert out.shape == (2, 3, 4, 4, 4)
        for i, c, a, b, d in itertools.product(range(2), range(3), range(4), range(4), range(4)):
            assert out[i, c, a, b, d] == x[i, c, 2 * a:2 * a + 2, 2 * b:2 * b + 2, 2 * d:2 * d + 2].max()

    def test_gradient_routes_to_argmax(self):
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 5.0
        t = Tensor(x, requires_grad=True)
        maxpool3d(t).backward(np.ones((1, 1, 1, 1, 1)))
        expect = np.zeros_like(x)
        expect[0, 0, 1, 0, 1] = 1.0
        assert np.array_equal(t.grad, expect)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            maxpool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))


class TestDeconv:
    @pytest.mark.parametrize("stride,dims,out", [((1, 1, 4), (32, 32, 8), (32, 32, 32)), ((2, 2, 2), (2, 2, 2), (4, 4, 4))])
    def test_paper_shapes(self, stride, dims, out):
        x = Tensor(np.zeros((1, 2) + dims))
        w = Tensor(np.zeros((2, 3) + stride))
        assert deconv3d(x, w, Tensor(np.zeros(3)), stride).shape == (1, 3) + out

    def test_adjoint_of_strided_conv(self, rng):
        stride = (2, 3, 1)
        x = rng.normal(size=(2, 3, 2, 2, 3))
        w = rng.normal(size=(3, 4) + stride)
        y = rng.normal(size=(2, 4, 4, 6, 3))
        lhs = np.sum(deconv3d(Tensor(x), Tensor(w), None, stride).data * y)
        rhs = np.sum(x * naive_strided_conv(y, w, stride))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_gradients(self, rng):
        tgt = rng.normal(size=(2, 4, 4, 6, 3))
        err = central_diff_check(lambda x, w, b: mse_loss(deconv3d(x, w, b, (2, 3, 1)), tgt),
                                 [rng.normal(size=(2, 3, 2, 2, 3)), rng.normal(size=(3, 4, 2, 3, 1)), rng.normal(size=4)],
                                 1e-5, rng)
        assert err < 1e-6


class TestBatchNorm:
    def test_train_normalises(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 3, 3, 3, 3))
        out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                        training=True, eps=0.0).data
        assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-6)
        assert np.allclose(out.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-6)

    def test_infer_equals_train_with_batch_stats(self, rng):
        x = rng.normal(1.0, 2.0, size=(4, 3, 3, 3, 3))
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        train = batchnorm(Tensor(x), g, b, np.zeros(3), np.ones(3), training=True, update_stats=False).data
        rm, rv = x.mean(axis=(0, 2, 3, 4)), x.var(axis=(0, 2, 3, 4))
        infer = batchnorm(Tensor(x), g, b, rm, rv, training=False).data
        assert np.max(np.abs(train - infer)) < 1e-6

    def test_running_update(self, rng):
        x = rng.normal(size=(4, 2, 2, 2, 2))
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
        assert np.allclose(rm, 0.01 * x.mean(axis=(0, 2, 3, 4)))
        assert np.allclose(rv, 0.99 + 0.01 * x.var(axis=(0, 2, 3, 4)))

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 3, 4, 4, 4))
        tgt = rng.normal(size=x.shape)
        rm, rv = np.zeros(3), np.ones(3)
        err = central_diff_check(
            lambda x, g, b: mse_loss(relu(batchnorm(x, g, b, rm, rv, True, update_stats=False)), tgt),
            [x, rng.normal(size=3), rng.normal(size=3)], 1e-5, rng)
        assert err < 1e-4


class TestAutodiff:
    def test_mean_square(self, rng):
        x = rng.normal(size=(2, 3, 4))
        t = Tensor(x, requires_grad=True)
        mean(square(t)).backward()
        assert np.allclose(t.grad, 2 * x / x.size)

    def test_concat_add(self, rng):
        a, b = rng.normal(size=(2, 3, 2, 2, 2)), rng.normal(size=(2, 3, 2, 2, 2))
        tgt = rng.normal(size=(2, 6, 2, 2, 2))
        err = central_diff_check(lambda a, b: mse_loss(add(concat([a, b]), concat([b, a])), tgt), [a, b], 1e-5, rng)
        assert err < 1e-6

    def test_tiny_net_every_parameter(self, rng):
        x = rng.normal(size=(2, 1, 4, 4, 4))
        tgt = rng.normal(size=(2, 1, 4, 4, 4))

        def net(w1, b1, w2, b2):
            return mse_loss(conv3d(relu(conv3d(Tensor(x), w1, b1)), w2, b2), tgt)

        arrays = [rng.normal(size=(2, 1, 3, 3, 3)), rng.normal(size=2), rng.normal(size=(1, 2, 3, 3, 3)), rng.normal(size=1)]
        err = central_diff_check(net, arrays, 1e-3, rng, per_tensor=10**6)
        assert err < 1e-4

    def test_dead_network(self):
        w1 = Tensor(np.ones((2, 1, 3, 3, 3)), requires_grad=True)
        b1 = Tensor(np.zeros(2), requires_grad=True)
        w2 = Tensor(np.ones((1, 2, 1, 1, 1)), requires_grad=True)
        b2 = Tensor(np.zeros(1), requires_grad=True)
        out = conv3d(relu(conv3d(Tensor(np.zeros((1, 1, 3, 3, 3))), w1, b1)), w2, b2)
        mean(relu(out)).backward()
        for t in (w1, b1, w2, b2):
            assert t.grad is None or not np.any(t.grad)

    def test_no_grad_records_nothing(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = square(t)
        assert not out.requires_grad


class TestAdam:
    def _one(self, g, t=1, p0=0.0, **kw):
        p = {"p": np.array([p0])}
        m, v = {"p": np.zeros(1)}, {"p": np.zeros(1)}
        adam_step(p, {"p": np.array([g])}, t, m, v, **kw)
        return p["p"][0]

    def test_zero_grad(self):
        assert self._one(0.0, p0=1.5) == 1.5

    def test_first_step(self):
        lr1 = 1e-3 / (1 + 1e-6)
        assert self._one(1.0) == pytest.approx(-lr1 / (1 + 1e-7), rel=1e-12)

    def test_decay(self):
        assert learning_rate(1_000_000) == pytest.approx(5e-4, rel=1e-12)

    def test_step_counter(self):
        with pytest.raises(ConfigError):
            self._one(1.0, t=0)

    @given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3))
    def test_first_step_magnitude_is_lr(self, g):
        assert abs(self._one(g)) == pytest.approx(1e-3 / (1 + 1e-6), rel=1e-3)


class TestGlorot:
    def test_conv_std(self):
        fi, fo = glorot_fans((16, 16, 3, 3, 3))
        std = math.sqrt(2 / (fi + fo))
        assert std == pytest.approx(0.0481, abs=1e-4)
        big = np.concatenate([glorot_normal_init((16, 16, 3, 3, 3), np.random.default_rng(s)).ravel() for s in range(15)])
        assert big.size >= 10**5
        assert abs(big.std() / std - 1) < 0.02

    def test_pointwise_unit(self):
        assert glorot_fans((1, 1, 1, 1, 1)) == (1, 1)

    def test_deterministic(self):
        a = glorot_normal_init((4, 2, 3, 3, 3), np.random.default_rng(7))
        b = glorot_normal_init((4, 2, 3, 3, 3), np.random.default_rng(7))
        assert np.array_equal(a, b)


def _small_graph():
    g = Graph()
    x = g.input(1)
    h = g.conv(x, 2, name="c1")
    h = g.relu(h, name="r1")
    h = g.batchnorm(h, name="bn1")
    g.output(g.conv(h, 1, (1, 1, 1), name="head"))
    return g


class TestGraphAndStore:
    def test_param_shapes(self):
        g = _small_graph()
        assert g.param_shapes() == {
            "c1.w": (2, 1, 3, 3, 3), "c1.b": (2,), "bn1.gamma": (2,), "bn1.beta": (2,),
            "head.w": (1, 2, 1, 1, 1), "head.b": (1,),
        }
        assert g.count_params() == 54 + 2 + 4 + 2 + 1

    def test_graph_errors(self):
        g = Graph()
        x = g.input(1)
        with pytest.raises(ConfigError):
            g.conv(x, 2, (2, 3, 3), name="even")
        with pytest.raises(ConfigError):
            g.relu("missing", name="r")
        g.relu(x, name="r")
        with pytest.raises(ConfigError):
            g.relu(x, name="r")

    def test_save_load(self, tmp_path, rng):
        g = _small_graph()
        store = ParamStore.initialize(g, rng)
        store.state["bn1.mean"][:] = [0.5, -0.25]
        store.step = 7
        store.save(tmp_path / "ck", {"k": 4})
        back, spec = ParamStore.load(tmp_path / "ck")
        assert spec == {"k": 4} and back.step == 7
        for k in store.params:
            assert np.array_equal(back.params[k], store.params[k])
        assert np.array_equal(back.state["bn1.mean"], [0.5, -0.25])
        back.check_against(g)
        x = rng.normal(size=(3, 1, 4, 4, 4))
        assert np.array_equal(g.predict(store, x), g.predict(back, x))

    def test_blob_is_little_endian_f32(self, tmp_path, rng):
        g = _small_graph()
        store = ParamStore.initialize(g, rng)
        store.save(tmp_path)
        raw = (tmp_path / "param__head.b.f32").read_bytes()
        assert raw == np.asarray(store.params["head.b"], dtype="<f4").tobytes()

    def test_load_missing(self, tmp_path):
        with pytest.raises(DataError):
            ParamStore.load(tmp_path)

    def test_input_shape_checked(self, rng):
        g = _small_graph()
        with pytest.raises(ShapeError):
            g.predict(ParamStore.initialize(g, rng), np.zeros((1, 2, 4, 4, 4)))
