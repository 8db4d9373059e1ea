import numpy as np
import pytest

from hashsplat import diffkernel as dk
from hashsplat.deform import DeformNet, FreqEncoding, deform, freq_encode, freq_encode_tensor
from hashsplat.diffkernel import Tensor


def test_freq_encode_examples():
    np.testing.assert_allclose(freq_encode([0.0], FreqEncoding(1)), [0.0, 1.0])
    np.testing.assert_allclose(freq_encode([0.5], FreqEncoding(2)), [1.0, 0.0, 0.0, -1.0], atol=1e-15)


def test_freq_encode_per_term_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 3)
    enc = FreqEncoding(10, include_input=True)
    out = freq_encode(x, enc)
    assert out.shape == (enc.out_dim(3),) == (63,)
    np.testing.assert_array_equal(out[:3], x)
    for k in range(10):
        for j in range(3):
            assert out[3 + 6 * k + j] == pytest.approx(np.sin(2 ** k * np.pi * x[j]), abs=1e-12)
            assert out[3 + 6 * k + 3 + j] == pytest.approx(np.cos(2 ** k * np.pi * x[j]), abs=1e-12)


def test_freq_encode_tensor_matches_numpy():
    x = np.random.default_rng(1).normal(size=(5, 3))
    enc = FreqEncoding(4, True)
    np.testing.assert_allclose(freq_encode_tensor(Tensor(x), enc).data, freq_encode(x, enc), atol=1e-15)


def test_bad_order():
    with pytest.raises(ValueError):
        FreqEncoding(0)


def test_input_dimension():
    net = DeformNet.create(np.random.default_rng(0))
    assert net.in_dim == 63 + 12
    assert net.params["W0"].shape == (75, 256)
    assert net.params["W5"].shape == (256 + 75, 256)
    assert sum(1 for k in net.params if k.startswith("W")) == 8


def test_fresh_net_zero_offsets():
    net = DeformNet.create(np.random.default_rng(0))
    mu = np.random.default_rng(1).normal(size=(7, 3))
    offs = deform(mu, 0.3, net, iteration=2000)
    for t in (offs.d_mu, offs.d_rot, offs.d_scale, offs.d_color):
        assert np.all(t.data == 0.0)


def randomized(rng, depth=3, width=16):
    net = DeformNet.create(rng, depth=depth, width=width, skip=1, pos_L=3, time_L=2)
    for k in net.params:
        if k.startswith("d_"):
            net.params[k] = rng.normal(size=net.params[k].shape) * 0.1
    return net


def test_warmup_returns_zeros_regardless_of_weights():
    net = randomized(np.random.default_rng(2))
    mu = np.random.default_rng(3).normal(size=(4, 3))
    offs = deform(mu, 0.5, net, iteration=100)
    assert all(np.all(t.data == 0) for t in (offs.d_mu, offs.d_rot, offs.d_scale, offs.d_color))
    after = deform(mu, 0.5, net, iteration=1500)
    assert np.any(after.d_mu.data != 0)


def test_dense_layer_reference():
    rng = np.random.default_rng(4)
    net = randomized(rng)
    mu = rng.normal(size=(5, 3))
    t = 0.25
    x = np.concatenate([freq_encode(mu, net.pos_enc), np.tile(freq_encode([t], net.time_enc), (5, 1))], axis=1)
    h = x
    for i in range(net.depth):
        h = np.maximum(h @ net.params[f"W{i}"] + net.params[f"b{i}"], 0)
        if i == net.skip:
            h = np.concatenate([x, h], axis=1)
    offs = deform(mu, t, net, iteration=10_000)
    for name in ("d_mu", "d_rot", "d_scale", "d_color"):
        np.testing.assert_allclose(getattr(offs, name).data, h @ net.params[f"{name}_W"] + net.params[f"{name}_b"],
                                   atol=1e-12)


def test_deterministic():
    net = randomized(np.random.default_rng(5))
    mu = np.random.default_rng(6).normal(size=(5, 3))
    a, b = deform(mu, 0.7, net, 5000), deform(mu, 0.7, net, 5000)
    assert np.array_equal(a.d_mu.data, b.d_mu.data)


def test_input_detached_from_mu():
    net = randomized(np.random.default_rng(7))
    with dk.Tape() as tape:
        mu = Tensor(np.random.default_rng(8).normal(size=(3, 3)), requires_grad=True)
        offs = deform(mu, 0.4, net, 5000)
        g = tape.backward(dk.sum_(offs.d_mu))
    assert mu not in g


def test_weight_gradients_finite_differences():
    rng = np.random.default_rng(9)
    net = randomized(rng, depth=2, width=6)
    mu = rng.normal(size=(4, 3))
    for key in ("W0", "b1", "d_mu_W", "d_rot_b"):
        def f(w, key=key):
            params = {k: Tensor(v) for k, v in net.params.items()}
            params[key] = w
            o = deform(mu, 0.6, net, 5000, params=params)
            return dk.sum_(dk.sin(o.d_mu)) + dk.sum_(o.d_rot * o.d_rot) + dk.sum_(o.d_scale) + dk.sum_(o.d_color)
        assert dk.check_gradients(f, net.params[key]) <= 1e-6
