import math

import numpy as np
import pytest

from dualshift.core import LabelSpace
from dualshift.losses import (
    LossWeights,
    Margins,
    PairSampler,
    build_selection_mask,
    margin_hinge,
    relative_contrastive_loss,
    relative_contrastive_terms,
    selective_cross_entropy,
    selective_cross_entropy_grad,
    selective_dice_bce,
    total_loss,
)

from helpers import central_difference, relative_error

SPACE = LabelSpace(num_known_classes=3)


def exhaustive_sampler():
    return PairSampler(pairs_per_term=10 ** 9, seed=0)


class TestMarginHinge:
    @pytest.mark.parametrize("x,lam,expected", [(3, 2, 0.0), (2, 2, 0.0), (1, 2, 1.0)])
    def test_values(self, x, lam, expected):
        assert margin_hinge(x, lam) == expected

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            margin_hinge(0.0, -1.0)
        with pytest.raises(ValueError):
            Margins(-1.0, 0.0, 0.0)


class TestRelativeContrastive:
    def test_scalar_hand_evaluation(self):
        # tau_10(5-1) + tau_5(5-2) + tau_5(-(2-1)) = 6 + 2 + 6
        loss = relative_contrastive_loss(
            u_in=[1.0], u_aug=[2.0], u_out=[5.0], pairs=[(0, 0)],
            margins=Margins(10, 5, 5), sampler=exhaustive_sampler())
        assert loss == pytest.approx(14.0)

    def test_saturated_hinges_give_zero(self):
        loss = relative_contrastive_loss(
            u_in=[0.0, 0.1], u_aug=[-6.0, -5.5], u_out=[20.0, 30.0], pairs=[(0, 0), (1, 1)],
            margins=Margins(10, 5, 5), sampler=exhaustive_sampler())
        assert loss == 0.0

    def test_duplicated_pairs_leave_mean_unchanged(self):
        args = dict(u_in=[1.0, 0.5], u_aug=[2.0, 2.5], u_out=[5.0], margins=Margins(10, 5, 5))
        once = relative_contrastive_loss(pairs=[(0, 0), (1, 1)],
                                         sampler=exhaustive_sampler(), **args)
        twice = relative_contrastive_loss(pairs=[(0, 0), (1, 1)] * 2,
                                          sampler=exhaustive_sampler(), **args)
        assert abs(once - twice) <= 1e-12

    def test_empty_everything_warns_and_returns_zero(self):
        with pytest.warns(UserWarning, match="no pairs"):
            result = relative_contrastive_terms([], [], [], None, Margins(1, 1, 1),
                                                exhaustive_sampler())
        assert result.loss == 0.0 and result.no_pairs

    def test_empty_term_contributes_zero(self):
        loss = relative_contrastive_loss(
            u_in=[0.0], u_aug=[], u_out=[5.0], pairs=None,
            margins=Margins(10, 5, 5), sampler=exhaustive_sampler())
        assert loss == pytest.approx(margin_hinge(5.0, 10.0))

    def test_sampling_is_unbiased(self):
        rng = np.random.default_rng(0)
        u_in = rng.normal(size=30)
        u_aug = rng.normal(size=30)
        u_out = rng.normal(size=20) + 1.0
        pairs = np.stack([rng.integers(0, 30, 200), rng.integers(0, 30, 200)], axis=1)
        margins = Margins(2.0, 1.0, 1.0)
        exact = relative_contrastive_loss(u_in, u_aug, u_out, pairs, margins,
                                          exhaustive_sampler())
        sampler = PairSampler(pairs_per_term=64, seed=123)
        draws = np.array([
            relative_contrastive_loss(u_in, u_aug, u_out, pairs, margins, sampler)
            for _ in range(1000)
        ])
        sem = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(draws.mean() - exact) <= 3.0 * sem

    def test_gradient_direction_opens_the_gap(self):
        # below margin: d/du_out < 0 (raise u_out), d/du_in > 0 (lower u_in)
        result = relative_contrastive_terms([1.0], [], [5.0], None, Margins(10, 0, 0),
                                            exhaustive_sampler())
        assert result.grad_out[0] < 0 and result.grad_in[0] > 0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            n_in, n_aug, n_out = 4, 3, 3
            u_in = rng.normal(size=n_in)
            u_aug = rng.normal(size=n_aug)
            u_out = rng.normal(size=n_out)
            pairs = np.stack([rng.integers(0, n_aug, 5), rng.integers(0, n_in, 5)], axis=1)
            margins = Margins(1.0, 0.7, 0.4)
            sampler = exhaustive_sampler()

            def gaps_near_kink(ui, ua, uo):
                g1 = np.abs((uo[:, None] - ui[None, :]) - margins.lambda1)
                g2 = np.abs((uo[:, None] - ua[None, :]) - margins.lambda2)
                g3 = np.abs(-(ua[pairs[:, 0]] - ui[pairs[:, 1]]) - margins.lambda3)
                return min(g1.min(), g2.min(), g3.min())

            if gaps_near_kink(u_in, u_aug, u_out) < 1e-3:
                continue
            result = relative_contrastive_terms(u_in, u_aug, u_out, pairs, margins, sampler)

            def f(packed):
                a, b, c = np.split(packed, [n_in, n_in + n_aug])
                return relative_contrastive_loss(a, b, c, pairs, margins, exhaustive_sampler())

            packed = np.concatenate([u_in, u_aug, u_out])
            fd = central_difference(f, packed)
            analytic = np.concatenate([result.grad_in, result.grad_aug, result.grad_out])
            err = relative_error(analytic, fd)
            err[np.abs(analytic) + np.abs(fd) < 1e-9] = 0.0
            assert err.max() <= 1e-3


class TestSelectionMask:
    def test_two_smallest(self):
        mask = build_selection_mask(np.array([0.1, 0.5, 0.9, 0.2]), np.ones(4, dtype=bool), 0.5)
        assert set(np.flatnonzero(mask.eta)) == {0, 3}

    def test_ratio_one_selects_all_eligible(self):
        eligible = np.array([True, False, True, True])
        mask = build_selection_mask(np.arange(4.0), eligible, 1.0)
        np.testing.assert_array_equal(mask.eta, eligible)

    def test_ties_break_by_index(self):
        mask = build_selection_mask(np.zeros(4), np.ones(4, dtype=bool), 0.5)
        assert set(np.flatnonzero(mask.eta)) == {0, 1}

    def test_no_eligible_gives_empty_mask(self):
        mask = build_selection_mask(np.arange(4.0), np.zeros(4, dtype=bool), 0.5)
        assert mask.num_selected == 0

    def test_exact_count_for_all_ratios(self):
        rng = np.random.default_rng(2)
        loss = rng.random((16, 16))
        eligible = rng.random((16, 16)) < 0.7
        for ratio in (0.6, 0.7, 0.8, 0.9, 1.0):
            mask = build_selection_mask(loss, eligible, ratio)
            assert mask.num_selected == math.ceil(ratio * eligible.sum())
            selected = loss[mask.eta]
            unselected = loss[eligible & ~mask.eta]
            if len(unselected):
                assert selected.max() <= unselected.min() + 1e-15

    def test_selection_never_increases_mean_loss(self):
        rng = np.random.default_rng(3)
        loss = rng.random(64)
        eligible = np.ones(64, dtype=bool)
        for ratio in (0.2, 0.5, 0.8, 1.0):
            mask = build_selection_mask(loss, eligible, ratio)
            assert loss[mask.eta].mean() <= loss.mean() + 1e-12

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError):
            build_selection_mask(np.zeros(4), np.ones(4, dtype=bool), 0.0)


class TestSelectiveCrossEntropy:
    def make_probs(self, rng, shape):
        raw = rng.random((3,) + shape) + 1e-3
        return raw / raw.sum(axis=0)

    def test_perfect_probs_give_zero(self):
        labels = np.array([[0, 1], [2, 0]])
        probs = np.zeros((3, 2, 2))
        for c in range(3):
            probs[c] = labels == c
        probs = np.clip(probs, 1e-12, 1.0)
        probs /= probs.sum(axis=0)
        mask = build_selection_mask(np.zeros((2, 2)), np.ones((2, 2), dtype=bool), 1.0)
        assert selective_cross_entropy(probs, labels, mask, SPACE) <= 1e-9

    def test_half_probability_gives_ln2(self):
        labels = np.zeros((1, 1), dtype=np.int64)
        probs = np.array([0.5, 0.25, 0.25]).reshape(3, 1, 1)
        mask = build_selection_mask(np.zeros((1, 1)), np.ones((1, 1), dtype=bool), 1.0)
        assert selective_cross_entropy(probs, labels, mask, SPACE) == pytest.approx(math.log(2.0))

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=(2, 4))
        probs = self.make_probs(rng, (2, 4))
        mask = build_selection_mask(rng.random((2, 4)), np.ones((2, 4), dtype=bool), 0.75)
        got = selective_cross_entropy(probs, labels, mask, SPACE)
        acc, count = 0.0, 0
        for i in range(2):
            for j in range(4):
                if mask.eta[i, j]:
                    acc += -math.log(probs[labels[i, j], i, j])
                    count += 1
        assert abs(got - acc / count) <= 1e-9

    def test_selected_ood_pixel_rejected(self):
        labels = np.array([[SPACE.ood_id]])
        probs = np.full((3, 1, 1), 1.0 / 3.0)
        mask = build_selection_mask(np.zeros((1, 1)), np.ones((1, 1), dtype=bool), 1.0)
        with pytest.raises(ValueError, match="ood/ignore"):
            selective_cross_entropy(probs, labels, mask, SPACE)

    def test_empty_selection_gives_zero(self):
        labels = np.zeros((2, 2), dtype=np.int64)
        probs = self.make_probs(np.random.default_rng(5), (2, 2))
        mask = build_selection_mask(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), 0.5)
        assert selective_cross_entropy(probs, labels, mask, SPACE) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 3, size=(2, 3))
        probs = self.make_probs(rng, (2, 3))
        mask = build_selection_mask(rng.random((2, 3)), np.ones((2, 3), dtype=bool), 0.7)
        grad = selective_cross_entropy_grad(probs, labels, mask)

        def f(p):
            sel = np.flatnonzero(mask.eta.reshape(-1))
            flat = p.reshape(p.shape[0], -1)
            y = labels.reshape(-1)[sel]
            return float(-np.mean(np.log(flat[y, sel])))

        fd = central_difference(f, probs)
        err = relative_error(grad, fd)
        err[np.abs(grad) + np.abs(fd) < 1e-9] = 0.0
        assert err.max() <= 1e-3


class TestSelectiveDiceBce:
    def test_saturated_correct_prediction(self):
        targets = np.zeros((2, 4, 4))
        targets[0, :2] = 1.0
        targets[1, 2:] = 1.0
        logits = np.where(targets > 0, 30.0, -30.0)
        assert selective_dice_bce(logits, targets, 1.0) < 0.01

    def test_ratio_one_equals_unselective(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(3, 4, 4))
        targets = (rng.random((3, 4, 4)) < 0.4).astype(float)
        selective = selective_dice_bce(logits, targets, 1.0)

        # independent unselective evaluation
        probs = 1.0 / (1.0 + np.exp(-logits))
        bce = -(targets * np.log(probs) + (1 - targets) * np.log1p(-probs))
        dice = 0.0
        for m in range(3):
            inter = (probs[m] * targets[m]).sum()
            dice += 1.0 - (2 * inter + 1) / (probs[m].sum() + targets[m].sum() + 1)
        unselective = bce.mean() + dice / 3
        assert abs(selective - unselective) <= 1e-9

    def test_planted_wrong_pixel_is_excluded(self):
        targets = np.zeros((1, 4, 4))
        targets[0, :2] = 1.0
        logits = np.where(targets > 0, 8.0, -8.0)
        logits[0, 3, 3] = 8.0  # wrong: target is 0 there
        got = selective_dice_bce(logits, targets, 15.0 / 16.0)

        # clean 15-pixel computation with the wrong pixel dropped
        keep = np.ones(16, dtype=bool)
        keep[15] = False
        lf, tf = logits.reshape(-1)[keep], targets.reshape(-1)[keep]
        probs = 1.0 / (1.0 + np.exp(-lf))
        bce = (-(tf * np.log(probs) + (1 - tf) * np.log1p(-probs))).mean()
        dice = 1.0 - (2 * (probs * tf).sum() + 1) / (probs.sum() + tf.sum() + 1)
        assert got == pytest.approx(bce + dice, abs=1e-9)

    def test_all_empty_targets_smoothing(self):
        logits = np.full((1, 3, 3), -20.0)
        targets = np.zeros((1, 3, 3))
        loss = selective_dice_bce(logits, targets, 1.0)
        assert np.isfinite(loss) and loss < 0.01

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            logits = rng.normal(size=(2, 3, 3))
            targets = (rng.random((2, 3, 3)) < 0.5).astype(float)
            ratio = 0.7
            loss, grad = selective_dice_bce(logits, targets, ratio, return_grad=True)

            # fixed selection: recompute the kept set and freeze it
            from dualshift.losses import _bce_with_logits
            bce = _bce_with_logits(logits, targets).reshape(2, -1)
            k = math.ceil(ratio * 9)
            order = np.argsort(bce, axis=1, kind="stable")
            boundary_gap = min(
                bce[m, order[m, k]] - bce[m, order[m, k - 1]] for m in range(2))
            if boundary_gap < 1e-3:
                continue

            def f(x):
                return selective_dice_bce(x, targets, ratio)

            fd = central_difference(f, logits)
            err = relative_error(grad, fd)
            err[np.abs(grad) + np.abs(fd) < 1e-9] = 0.0
            assert err.max() <= 1e-3


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(1.0, 2.0, 3.0, LossWeights(50.0, 10.0)) == 131.0

    def test_zero_weights_leave_unc_only(self):
        assert total_loss(4.0, 2.0, 3.0, LossWeights(0.0, 0.0)) == 4.0

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, LossWeights(50.0, 10.0)) == 0.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            total_loss(np.nan, 0.0, 0.0, LossWeights())
