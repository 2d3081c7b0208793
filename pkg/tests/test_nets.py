import numpy as np
import pytest

from pclab import nets
from pclab.errors import DimensionMismatchError, NonFiniteGradientError


def random_net(rng, dims=None, bias_free=False):
    if dims is None:
        n_hidden = rng.integers(1, 3)
        dims = [int(rng.integers(2, 6))] + [int(rng.integers(3, 9)) for _ in range(n_hidden)] \
               + [int(rng.integers(1, 5))]
    acts = [str(rng.choice(["relu", "tanh", "identity"])) for _ in range(len(dims) - 1)]
    return nets.init_net(dims, acts, seed=int(rng.integers(0, 2**31)), bias_free=bias_free)


def naive_forward(net, x):
    """Independent straight-line re-evaluation of the layer composition."""
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        z = layer.w @ h
        if layer.b is not None:
            z = z + layer.b
        if layer.activation == "relu":
            h = np.where(z > 0, z, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h


def flat_params(net):
    return np.concatenate([p.ravel() for p in net.params()])


def set_flat_params(net, theta):
    i = 0
    for p in net.params():
        p.flat[:] = theta[i:i + p.size]
        i += p.size


def fd_param_grads(net, x, upstream, h=1e-5):
    """Central finite differences of sum(upstream * forward(x)) over params."""
    theta0 = flat_params(net).copy()
    g = np.zeros_like(theta0)
    for i in range(len(theta0)):
        theta = theta0.copy()
        theta[i] = theta0[i] + h
        set_flat_params(net, theta)
        f_plus = float(np.sum(upstream * nets.forward(net, x)))
        theta[i] = theta0[i] - h
        set_flat_params(net, theta)
        f_minus = float(np.sum(upstream * nets.forward(net, x)))
        g[i] = (f_plus - f_minus) / (2 * h)
    set_flat_params(net, theta0)
    return g


class TestForward:
    def test_zero_net_maps_to_zero(self):
        net = nets.init_net([3, 4, 2], ["relu", "identity"], seed=0)
        for layer in net.layers:
            layer.w[:] = 0.0
            layer.b[:] = 0.0
        assert np.array_equal(nets.forward(net, np.array([1.0, -2.0, 3.0])), np.zeros(2))

    def test_identity_layer(self):
        net = nets.DenseNet([nets.Layer(w=np.eye(2), b=np.zeros(2), activation="identity")])
        out = nets.forward(net, np.array([0.3, -0.7]))
        assert np.array_equal(out, np.array([0.3, -0.7]))

    def test_matches_naive_composition(self):
        # oracle: duplicate straight-line forward pass
        rng = np.random.default_rng(7)
        net = nets.init_net([4, 8, 2], ["tanh", "identity"], seed=3)
        for _ in range(20):
            x = rng.normal(size=4)
            np.testing.assert_allclose(nets.forward(net, x), naive_forward(net, x),
                                       rtol=0, atol=1e-12)

    def test_batched_forward_matches_rows(self):
        # batch (GEMM) and single-row (GEMV) BLAS paths may differ in the
        # last ulp; bit-equality is only contracted for identical call shapes
        rng = np.random.default_rng(8)
        net = random_net(rng, dims=[3, 5, 4])
        xs = rng.normal(size=(6, 3))
        batched = nets.forward(net, xs)
        for i in range(6):
            np.testing.assert_allclose(batched[i], nets.forward(net, xs[i]),
                                       rtol=1e-12, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        net = nets.init_net([3, 2], ["identity"], seed=0)
        with pytest.raises(DimensionMismatchError):
            nets.forward(net, np.zeros(4))

    def test_deterministic_bitwise(self):
        net = nets.init_net([4, 8, 3], ["relu", "tanh"], seed=11)
        x = np.random.default_rng(0).normal(size=4)
        a = nets.forward(net, x)
        b = nets.forward(net, x)
        assert np.array_equal(a, b)

    def test_seeded_init_reproducible(self):
        a = nets.init_net([4, 8, 2], ["relu", "identity"], seed=5)
        b = nets.init_net([4, 8, 2], ["relu", "identity"], seed=5)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.w, lb.w)
            assert np.array_equal(la.b, lb.b)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        net = random_net(rng)
        x = rng.normal(size=net.input_dim)
        grads, gx = nets.backward(net, x, np.zeros(net.output_dim))
        assert np.array_equal(gx, np.zeros_like(gx))
        for dw, db in grads:
            assert not dw.any()
            assert db is None or not db.any()

    def test_single_linear_layer_outer_product(self):
        w = np.random.default_rng(2).normal(size=(3, 4))
        net = nets.DenseNet([nets.Layer(w=w, b=np.zeros(3), activation="identity")])
        x = np.array([1.0, 2.0, -1.0, 0.5])
        up = np.array([0.3, -0.2, 1.1])
        grads, gx = nets.backward(net, x, up)
        np.testing.assert_allclose(grads[0][0], np.outer(up, x), atol=1e-14)
        np.testing.assert_allclose(grads[0][1], up, atol=1e-14)
        np.testing.assert_allclose(gx, up @ w, atol=1e-14)

    def test_gradient_check_100_random_nets(self):
        # acceptance-grade oracle: central finite differences, h=1e-5
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            net = random_net(rng, bias_free=bool(rng.integers(0, 2)))
            x = rng.normal(size=net.input_dim)
            up = rng.normal(size=net.output_dim)
            grads, _ = nets.backward(net, x, up)
            flat = np.concatenate([g.ravel() for g in nets.flatten_grads(net, grads)])
            fd = fd_param_grads(net, x, up)
            rel = np.abs(flat - fd) / np.maximum(np.abs(fd), 1.0)
            worst = max(worst, float(rel.max()))
        assert worst < 1e-4

    def test_input_grad_matches_fd(self):
        rng = np.random.default_rng(3)
        net = random_net(rng, dims=[4, 6, 3])
        x = rng.normal(size=4)
        up = rng.normal(size=3)
        _, gx = nets.backward(net, x, up)
        h = 1e-6
        fd = np.zeros(4)
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (np.sum(up * nets.forward(net, xp))
                     - np.sum(up * nets.forward(net, xm))) / (2 * h)
        np.testing.assert_allclose(gx, fd, rtol=1e-5, atol=1e-7)

    def test_batch_grads_sum_over_batch(self):
        rng = np.random.default_rng(4)
        net = random_net(rng, dims=[3, 4, 2])
        xs = rng.normal(size=(5, 3))
        ups = rng.normal(size=(5, 2))
        grads_batch, gx_batch = nets.backward(net, xs, ups)
        acc = None
        for i in range(5):
            g, gx = nets.backward(net, xs[i], ups[i])
            flat = np.concatenate([a.ravel() for a in nets.flatten_grads(net, g)])
            acc = flat if acc is None else acc + flat
            np.testing.assert_allclose(gx_batch[i], gx, atol=1e-12)
        flat_batch = np.concatenate([a.ravel() for a in nets.flatten_grads(net, grads_batch)])
        np.testing.assert_allclose(flat_batch, acc, rtol=1e-12, atol=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0]), np.array([[0.5]])]
        st = nets.adam_init(p, lr=0.1)
        before = [q.copy() for q in p]
        nets.adam_step(p, [np.zeros(2), np.zeros((1, 1))], st)
        for a, b in zip(p, before):
            assert np.array_equal(a, b)

    def test_first_step_is_signed_lr(self):
        # closed form of the bias-corrected first step: -lr*sign(g)
        p = [np.array([1.0, 1.0, 1.0])]
        g = [np.array([0.3, -2.0, 1e-3])]
        st = nets.adam_init(p, lr=0.01)
        nets.adam_step(p, g, st)
        np.testing.assert_allclose(p[0], 1.0 - 0.01 * np.sign(g[0]), rtol=1e-4)

    def test_ten_step_sequence_matches_scripted_oracle(self):
        # hand-rolled reference computed independently below
        rng = np.random.default_rng(9)
        p = [rng.normal(size=4)]
        grads = [rng.normal(size=4) for _ in range(10)]
        ref = p[0].copy()
        m = np.zeros(4)
        v = np.zeros(4)
        lr, b1, b2, eps = 2e-3, 0.9, 0.999, 1e-8
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        st = nets.adam_init(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        for g in grads:
            nets.adam_step(p, [g], st)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12, atol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        p = [np.array([1.0])]
        st = nets.adam_init(p, lr=0.1)
        with pytest.raises(NonFiniteGradientError):
            nets.adam_step(p, [np.array([np.nan])], st)
        assert st.step == 0
        assert p[0][0] == 1.0

    def test_bias_free_net_stays_bias_free_under_training(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, dims=[3, 6, 2], bias_free=True)
        opt = nets.adam_init(net.params(), lr=1e-2)
        for _ in range(25):
            x = rng.normal(size=(8, 3))
            up = rng.normal(size=(8, 2))
            grads, _ = nets.backward(net, x, up)
            nets.adam_step(net.params(), nets.flatten_grads(net, grads), opt)
        assert net.bias_free


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        net = random_net(rng)
        path = tmp_path / "net.json"
        nets.save_net(net, path)
        loaded = nets.load_net(path)
        x = rng.normal(size=net.input_dim)
        assert np.array_equal(nets.forward(net, x), nets.forward(loaded, x))
        assert loaded.bias_free == net.bias_free

    def test_version_guard(self, tmp_path):
        net = nets.init_net([2, 2], ["identity"], seed=0)
        d = nets.net_to_dict(net)
        d["version"] = 99
        with pytest.raises(ValueError):
            nets.net_from_dict(d)
