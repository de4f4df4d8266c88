import math

import numpy as np
import pytest

from dualshift.heads import (
    FeatureBundle,
    HeadMode,
    UncertaintyHead,
    anomaly_score,
    init_from_class_head,
    logsumexp,
    mask_msp_uncertainty,
    mask_msp_vjp,
    pixel_energy_uncertainty,
    pixel_energy_vjp,
)

from helpers import central_difference, relative_error


def scalar_logsumexp_rows(z):
    out = []
    for row in np.atleast_2d(z):
        m = max(row)
        out.append(m + math.log(sum(math.exp(v - m) for v in row)))
    return np.asarray(out)


class TestInit:
    def test_copy_semantics(self):
        w = np.eye(3)
        head = init_from_class_head(w, HeadMode.PIXEL_ENERGY)
        head.weights[0, 0] = 99.0
        assert w[0, 0] == 1.0  # source untouched

    def test_nan_weights_rejected(self):
        w = np.eye(3)
        w[1, 1] = np.nan
        with pytest.raises(ValueError):
            init_from_class_head(w, HeadMode.PIXEL_ENERGY)

    def test_class_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            init_from_class_head(np.zeros((4, 3)), HeadMode.PIXEL_ENERGY, num_classes=5)

    def test_energy_identity_at_initialization(self):
        rng = np.random.default_rng(0)
        w_in = rng.normal(size=(8, 5))
        feats = rng.normal(size=(40, 8))
        head = init_from_class_head(w_in, HeadMode.PIXEL_ENERGY)
        direct = scalar_logsumexp_rows(feats @ w_in)
        assert np.abs(pixel_energy_uncertainty(feats, head) - direct).max() <= 1e-6


class TestPixelEnergy:
    def test_equal_logits_give_log_c(self):
        head = UncertaintyHead(np.zeros((1, 2)), HeadMode.PIXEL_ENERGY)
        u = pixel_energy_uncertainty(np.ones((1, 1)), head)
        assert u[0] == pytest.approx(math.log(2.0))

    def test_huge_logits_do_not_overflow(self):
        head = UncertaintyHead(np.array([[1000.0, 0.0]]), HeadMode.PIXEL_ENERGY)
        u = pixel_energy_uncertainty(np.ones((1, 1)), head)
        assert np.isfinite(u[0]) and u[0] == pytest.approx(1000.0, abs=1e-6)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(5, 3))
        head = UncertaintyHead(rng.normal(size=(3, 4)), HeadMode.PIXEL_ENERGY)
        u = pixel_energy_uncertainty(feats, head)
        assert np.abs(u - scalar_logsumexp_rows(feats @ head.weights)).max() <= 1e-9

    def test_nonfinite_features_rejected(self):
        head = UncertaintyHead(np.eye(2), HeadMode.PIXEL_ENERGY)
        with pytest.raises(ValueError):
            pixel_energy_uncertainty(np.array([[np.inf, 0.0]]), head)

    def test_wrong_mode_rejected(self):
        head = UncertaintyHead(np.eye(2), HeadMode.MASK_MSP)
        with pytest.raises(ValueError):
            pixel_energy_uncertainty(np.ones((1, 2)), head)

    def test_logsumexp_shift_identity(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(10, 6))
        shift = 3.7
        np.testing.assert_allclose(logsumexp(z + shift), logsumexp(z) + shift, atol=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(4, 3))
        head = UncertaintyHead(rng.normal(size=(3, 5)), HeadMode.PIXEL_ENERGY)
        u_bar = rng.normal(size=4)
        d_feats, d_w = pixel_energy_vjp(feats, head, u_bar)

        def f_feats(x):
            return float(u_bar @ pixel_energy_uncertainty(x, head))

        def f_w(w):
            return float(u_bar @ pixel_energy_uncertainty(feats, UncertaintyHead(w, head.mode)))

        assert relative_error(d_feats, central_difference(f_feats, feats)).max() <= 1e-3
        assert relative_error(d_w, central_difference(f_w, head.weights)).max() <= 1e-3


class TestMaskMsp:
    def test_uniform_single_query(self):
        head = UncertaintyHead(np.zeros((2, 2)), HeadMode.MASK_MSP)
        bundle = FeatureBundle(np.ones((1, 2)), mask_logits=np.full((1, 2, 2), 50.0))
        u = mask_msp_uncertainty(bundle, head)
        np.testing.assert_allclose(u, 0.5, atol=1e-9)

    def test_zero_mask_gives_zero(self):
        head = UncertaintyHead(np.zeros((2, 3)), HeadMode.MASK_MSP)
        bundle = FeatureBundle(np.ones((1, 2)), mask_logits=np.full((1, 2, 2), -50.0))
        assert mask_msp_uncertainty(bundle, head).max() <= 1e-9

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(4)
        M, C, F, H, W = 3, 4, 5, 2, 2
        head = UncertaintyHead(rng.normal(size=(F, C)), HeadMode.MASK_MSP)
        bundle = FeatureBundle(rng.normal(size=(M, F)), mask_logits=rng.normal(size=(M, H, W)))
        u = mask_msp_uncertainty(bundle, head)

        z = bundle.features @ head.weights
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        sig = 1.0 / (1.0 + np.exp(-bundle.mask_logits))
        expected = np.zeros((H, W))
        for h in range(H):
            for w in range(W):
                best = -np.inf
                for c in range(C):
                    val = sum(probs[m, c] * sig[m, h, w] for m in range(M))
                    best = max(best, val)
                expected[h, w] = best
        assert np.abs(u - expected).max() <= 1e-9

    def test_missing_mask_logits_rejected(self):
        head = UncertaintyHead(np.zeros((2, 2)), HeadMode.MASK_MSP)
        with pytest.raises(ValueError):
            mask_msp_uncertainty(FeatureBundle(np.ones((1, 2))), head)

    def test_monotone_in_mask_values(self):
        rng = np.random.default_rng(5)
        head = UncertaintyHead(rng.normal(size=(4, 3)), HeadMode.MASK_MSP)
        logits = rng.normal(size=(2, 3, 3))
        base = mask_msp_uncertainty(FeatureBundle(rng.normal(size=(2, 4)), logits), head)
        feats = rng.normal(size=(2, 4))
        base = mask_msp_uncertainty(FeatureBundle(feats, logits), head)
        bumped = mask_msp_uncertainty(FeatureBundle(feats, logits + 0.5), head)
        assert (bumped >= base - 1e-12).all()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        M, C, F, H, W = 3, 4, 5, 2, 3
        for attempt in range(10):
            head = UncertaintyHead(rng.normal(size=(F, C)), HeadMode.MASK_MSP)
            bundle = FeatureBundle(rng.normal(size=(M, F)), rng.normal(size=(M, H, W)))
            probs_map = np.einsum(
                "mc,mhw->chw",
                np.exp(bundle.features @ head.weights)
                / np.exp(bundle.features @ head.weights).sum(1, keepdims=True),
                1.0 / (1.0 + np.exp(-bundle.mask_logits)))
            top2 = np.sort(probs_map, axis=0)[-2:]
            if (top2[1] - top2[0]).min() > 1e-3:  # avoid argmax kinks
                break
        map_bar = rng.normal(size=(H, W))
        d_feats, d_w, d_logits = mask_msp_vjp(bundle, head, map_bar)

        def f_feats(x):
            return float((map_bar * mask_msp_uncertainty(
                FeatureBundle(x, bundle.mask_logits), head)).sum())

        def f_w(w):
            return float((map_bar * mask_msp_uncertainty(
                bundle, UncertaintyHead(w, head.mode))).sum())

        def f_logits(ml):
            return float((map_bar * mask_msp_uncertainty(
                FeatureBundle(bundle.features, ml), head)).sum())

        assert relative_error(d_feats, central_difference(f_feats, bundle.features)).max() <= 1e-3
        assert relative_error(d_w, central_difference(f_w, head.weights)).max() <= 1e-3
        assert relative_error(d_logits, central_difference(f_logits, bundle.mask_logits)).max() <= 1e-3


class TestAnomalyScore:
    def test_default_negates(self):
        u = np.array([1.0, -2.0])
        np.testing.assert_array_equal(anomaly_score(u), -u)

    def test_configurable_sign(self):
        u = np.array([1.0, -2.0])
        np.testing.assert_array_equal(anomaly_score(u, sign=1.0), u)
