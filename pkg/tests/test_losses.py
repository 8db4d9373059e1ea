import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hashsplat import diffkernel as dk
from hashsplat.diffkernel import Tensor
from hashsplat.losses import (LossWeights, SlidingWindowStats, consistency_loss, denoise_loss, mask_loss,
                              photometric_loss, static_loss, total_loss)
from hashsplat.metrics import ssim


def test_weights_defaults():
    w = LossWeights()
    assert (w.w_dn, w.w_s, w.w_con, w.w_m, w.lambda_dssim) == (1e-2, 1e-3, 1e-3, 5e-4, 0.2)
    assert (w.static_from, w.consistency_from, w.denoise_from) == (3000, 3000, 5000)
    with pytest.raises(ValueError):
        LossWeights(w_dn=-1)


def test_photometric_identical_zero():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert float(photometric_loss(Tensor(img), img).data) == pytest.approx(0.0, abs=1e-12)


def test_photometric_constant_offset():
    img = np.random.default_rng(1).uniform(0, 0.8, size=(16, 16, 3))
    val = float(photometric_loss(Tensor(img + 0.1), img).data)
    s = ssim(img + 0.1, img, padding="same")
    assert val == pytest.approx(0.8 * 0.1 + 0.2 * (1 - s) / 2, abs=1e-12)


def test_photometric_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(Tensor(np.zeros((4, 4, 3))), np.zeros((4, 5, 3)))


def test_photometric_gradient():
    rng = np.random.default_rng(2)
    target = rng.uniform(size=(8, 8, 3))
    x = rng.uniform(size=(8, 8, 3))
    assert dk.check_gradients(lambda t: photometric_loss(t, target), x) <= 1e-6


def test_mask_loss():
    assert float(mask_loss(np.zeros(5)).data) == 0.5
    assert float(mask_loss(np.full(3, -1e4)).data) == 0.0
    m = np.array([-1.0, 0.0, 2.0])
    assert float(mask_loss(m).data) == pytest.approx(np.mean(1 / (1 + np.exp(-m))))


def test_static_examples():
    d = np.array([[0.02, 0, 0], [0, 0.08, 0], [0.5, 0, 0]])
    assert float(static_loss(d).data) == pytest.approx(0.8 * 0.02 + 0.2 * 0.08)
    assert float(static_loss(d).data) == pytest.approx(0.032)
    same = np.array([[0.01, 0.02, 0.0]] * 4)
    assert float(static_loss(same).data) == pytest.approx(0.03)
    assert float(static_loss(np.full((3, 3), 0.2)).data) == 0.0


def test_static_gradient_with_frozen_weights():
    rng = np.random.default_rng(3)
    d = rng.uniform(0.001, 0.03, (6, 3)) * rng.choice([-1, 1], (6, 3))
    d[0] = [0.2, 0.1, 0.0]
    assert dk.check_gradients(static_loss, d) <= 1e-5


def test_consistency_examples():
    d = np.array([[1.0, 0, 0], [3.0, 0, 0]])
    assert float(consistency_loss(d).data) == 1.0
    eq = np.array([[0.4, 0, 0]] * 5)
    assert float(consistency_loss(eq).data) == 0.0


def consistency_oracle(d):
    total = 0.0
    for ax in range(3):
        for sel in (d[:, ax] > 0, d[:, ax] < 0):
            v = d[sel, ax]
            if v.size:
                total += np.mean(np.abs(v - v.mean()))
    return total


finite = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7, 3), elements=finite))
def test_consistency_groupwise_oracle(d):
    assert float(consistency_loss(d).data) == pytest.approx(consistency_oracle(d), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(0.01, 1)), st.floats(0, 2))
def test_consistency_shift_invariance(x, c):
    d = np.zeros((6, 3))
    d[:, 0] = x
    e = d.copy()
    e[:, 0] += c
    assert float(consistency_loss(e).data) == pytest.approx(float(consistency_loss(d).data), abs=1e-12)


def test_consistency_gradient():
    rng = np.random.default_rng(4)
    d = rng.normal(size=(8, 3))
    assert dk.check_gradients(consistency_loss, d) <= 1e-5


def _window(scales, opac):
    w = SlidingWindowStats(capacity=3, stride=1)
    for s, o in zip(scales, opac):
        w.maybe_record(0, s, o)
    return w


def test_window_capacity_and_stride():
    w = SlidingWindowStats(capacity=2, stride=10)
    assert not w.maybe_record(5, np.ones((1, 3)), np.ones(1))
    for i, v in enumerate((1.0, 2.0, 3.0)):
        assert w.maybe_record(10 * i, np.full((1, 3), v), np.full(1, v))
    Es, Eo = w.expectation()
    assert Eo[0] == 2.5 and len(w) == 2


def test_denoise_examples():
    s = np.full((4, 3), 0.1)
    o = np.full(4, 0.8)
    w = _window([s], [o])
    assert float(denoise_loss(Tensor(s), Tensor(o), w).data) == 0.0
    o2 = o.copy()
    s2 = s.copy()
    o2[1] = 0.0
    s2[1] = 0.0
    val = float(denoise_loss(Tensor(s2), Tensor(o2), w).data)
    assert val == pytest.approx(0.3 / 4 + 0.8 / 4)
    assert float(denoise_loss(Tensor(s), Tensor(o), SlidingWindowStats()).data) == 0.0


def test_denoise_elementwise_oracle_and_gradient():
    rng = np.random.default_rng(5)
    hist_s = [rng.uniform(0, 1, (5, 3)) for _ in range(3)]
    hist_o = [rng.uniform(0, 1, 5) for _ in range(3)]
    w = _window(hist_s, hist_o)
    s, o = rng.uniform(0, 1, (5, 3)), rng.uniform(0, 1, 5)
    Es, Eo = np.mean(hist_s, axis=0), np.mean(hist_o, axis=0)
    ref = np.mean(np.abs(Es - s).sum(axis=1)) + np.mean(np.abs(Eo - o))
    assert float(denoise_loss(Tensor(s), Tensor(o), w).data) == pytest.approx(ref, abs=1e-12)
    assert dk.check_gradients(lambda t: denoise_loss(t, Tensor(o), w), s) <= 1e-5


def test_window_remap_and_fill():
    w = _window([np.arange(6.0).reshape(2, 3)], [np.array([0.1, 0.2])])
    w.remap(np.array([1, 1, 0]))
    assert list(w.expectation()[1]) == [0.2, 0.2, 0.1]
    w.remap_with_fill(np.array([0, -1]))
    Es, Eo = w.expectation()
    assert np.isnan(Eo[1]) and Eo[0] == 0.2
    # a point without history contributes nothing
    val = denoise_loss(Tensor(np.zeros((2, 3))), Tensor(np.array([0.2, 0.9])), w)
    assert float(val.data) == pytest.approx(np.abs(Es[0]).sum() / 2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=finite))
def test_losses_non_negative(d):
    assert float(static_loss(d).data) >= 0
    assert float(consistency_loss(d).data) >= 0
    assert float(mask_loss(d[:, 0] * 10).data) >= 0


def test_total_loss_gating():
    w = LossWeights()
    terms = {k: Tensor(1.0) for k in ("photometric", "mask", "static", "consistency", "denoise")}
    for it, expect in ((2000, 1 + 5e-4), (2999, 1 + 5e-4), (4000, 1 + 5e-4 + 2e-3), (6000, 1 + 5e-4 + 2e-3 + 1e-2)):
        total, rec = total_loss(terms, w, it)
        assert float(total.data) == pytest.approx(expect)
    _, rec = total_loss(terms, w, 2999)
    assert rec["static"] == 0.0 and rec["consistency"] == 0.0 and rec["denoise"] == 0.0
    _, rec = total_loss(terms, w, 4999)
    assert rec["denoise"] == 0.0 and rec["static"] > 0
