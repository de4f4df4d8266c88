import numpy as np
import pytest

import dualshift.nn as nn
from dualshift.model import ToySegModel, cross_entropy_grad, energy_map, pixel_cross_entropy

from helpers import central_difference, relative_error


@pytest.fixture
def float64_stack(monkeypatch):
    # gradient checks want float64 precision; the default stack is float32
    monkeypatch.setattr(nn, "DTYPE", np.float64)


def scalar_loss(out, w_bar):
    return float((out * w_bar).sum())


class TestConv2d(object):
    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, float64_stack, stride):
        rng = np.random.default_rng(0)
        conv = nn.Conv2d(2, 3, ksize=3, stride=stride, rng=rng)
        x = rng.standard_normal((2, 2, 6, 6))
        w_bar = rng.standard_normal(conv.forward(x).shape)

        conv.forward(x)
        dx = conv.backward(w_bar)
        fd_x = central_difference(lambda x_: scalar_loss(conv.forward(x_), w_bar), x.copy())
        assert np.abs(dx - fd_x).max() <= 1e-6

        def f_w(w):
            old = conv.weight.value.copy()
            conv.weight.value[...] = w
            val = scalar_loss(conv.forward(x), w_bar)
            conv.weight.value[...] = old
            return val

        fd_w = central_difference(f_w, conv.weight.value.copy())
        assert np.abs(conv.weight.grad - fd_w).max() <= 1e-6

    def test_output_shapes(self):
        conv = nn.Conv2d(3, 8, ksize=3, stride=2)
        assert conv.forward(np.zeros((1, 3, 16, 16), dtype=np.float32)).shape == (1, 8, 8, 8)

    def test_one_by_one_conv(self):
        conv = nn.Conv2d(4, 2, ksize=1, bias=False)
        out = conv.forward(np.ones((1, 4, 5, 5), dtype=np.float32))
        assert out.shape == (1, 2, 5, 5)


class TestUpsample(object):
    def test_gradients(self, float64_stack):
        rng = np.random.default_rng(1)
        up = nn.Upsample2x()
        x = rng.standard_normal((1, 2, 3, 3))
        w_bar = rng.standard_normal((1, 2, 6, 6))
        up.forward(x)
        dx = up.backward(w_bar)
        fd = central_difference(lambda x_: scalar_loss(up.forward(x_), w_bar), x.copy())
        assert np.abs(dx - fd).max() <= 1e-7


class TestAdam(object):
    def test_minimizes_quadratic(self):
        p = nn.Param(np.array([5.0, -3.0]), "p")
        opt = nn.Adam([p], lr=0.1)
        for _ in range(400):
            opt.zero_grad()
            p.grad += 2 * p.value
            opt.step()
        assert np.abs(p.value).max() < 1e-2

    def test_rejects_bad_lr(self):
        with pytest.raises(ValueError):
            nn.Adam([nn.Param(np.zeros(1), "p")], lr=0.0)


class TestToySegModel(object):
    def test_output_shapes_for_divisible_sizes(self):
        model = ToySegModel(num_classes=5, width=8, feature_dim=8)
        for hw in (16, 24, 32):
            feats, logits = model.forward(np.zeros((2, 3, hw, hw), dtype=np.float32))
            assert feats.shape == (2, 8, hw, hw)
            assert logits.shape == (2, 5, hw, hw)

    def test_indivisible_size_rejected(self):
        model = ToySegModel(num_classes=3)
        with pytest.raises(ValueError, match="stride"):
            model.forward(np.zeros((1, 3, 15, 16), dtype=np.float32))

    def test_class_weights_shape_and_tie(self):
        model = ToySegModel(num_classes=4, feature_dim=8)
        w = model.class_weights
        assert w.shape == (8, 4)
        feats, logits = model.forward(np.random.rand(1, 3, 8, 8).astype(np.float32))
        np.testing.assert_allclose(energy_map(feats, w),
                                   np.log(np.exp(logits.astype(np.float64)).sum(axis=1)),
                                   atol=1e-5)

    def test_state_roundtrip(self):
        a = ToySegModel(num_classes=3, seed=0)
        b = ToySegModel(num_classes=3, seed=99)
        b.load_state(a.state())
        x = np.random.rand(1, 3, 8, 8).astype(np.float32)
        np.testing.assert_array_equal(a.forward(x)[1], b.forward(x)[1])

    def test_seeded_init_is_deterministic(self):
        a = ToySegModel(num_classes=3, seed=4)
        b = ToySegModel(num_classes=3, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_full_model_gradcheck(self, float64_stack):
        rng = np.random.default_rng(2)
        model = ToySegModel(num_classes=3, width=4, feature_dim=4, seed=1)
        x = rng.random((1, 3, 8, 8)) * 0.8 + 0.1
        labels = rng.integers(0, 3, (1, 8, 8))
        eligible = np.ones((1, 8, 8), dtype=bool)

        def loss_and_probs():
            feats, logits = model.forward(x)
            ce, probs = pixel_cross_entropy(logits, labels, eligible)
            return float(ce.sum() / eligible.sum()), probs, feats

        _, probs, feats = loss_and_probs()
        for p in model.parameters():
            p.grad[...] = 0.0
        model.backward(np.zeros_like(feats),
                       cross_entropy_grad(probs, labels, eligible / eligible.sum()),
                       through_encoder=True)
        p0 = model.encoder.params()[0]

        def f(w):
            old = p0.value.copy()
            p0.value[...] = w
            val = loss_and_probs()[0]
            p0.value[...] = old
            return val

        fd = central_difference(f, p0.value.copy())
        err = relative_error(p0.grad, fd)
        err[np.abs(p0.grad) + np.abs(fd) < 1e-8] = 0.0
        assert err.max() <= 1e-3
