import numpy as np
import pytest

from dualshift.core import LabelSpace
from dualshift.metrics import (
    MetricUndefinedError,
    ScoredPixels,
    auroc,
    average_precision,
    fpr_at_95_tpr,
    miou_macc,
)

from helpers import (
    ap_threshold_sweep_oracle,
    auroc_pairwise_oracle,
    fpr95_sweep_oracle,
    miou_loop_oracle,
)

SPACE = LabelSpace(num_known_classes=4)


def random_scored(rng, n, tie_prob=0.3):
    scores = rng.normal(size=n)
    if rng.random() < tie_prob:
        # quantize to force tie groups
        scores = np.round(scores, 1)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[rng.integers(n)] = 1
    if labels.sum() == n:
        labels[rng.integers(n)] = 0
    return ScoredPixels(scores, labels)


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc(ScoredPixels([0.1, 0.9], [0, 1])) == 1.0

    def test_inverted_ranking(self):
        assert auroc(ScoredPixels([0.9, 0.1], [0, 1])) == 0.0

    def test_single_class_rejected(self):
        with pytest.raises(MetricUndefinedError):
            auroc(ScoredPixels([0.1, 0.9], [1, 1]))

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            sp = random_scored(rng, 200)
            assert abs(auroc(sp) - auroc_pairwise_oracle(sp.scores, sp.labels)) <= 1e-10

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(3)
        sp = random_scored(rng, 300)
        base = auroc(sp)
        assert auroc(ScoredPixels(2.5 * sp.scores + 1.0, sp.labels)) == pytest.approx(base, abs=1e-12)
        assert auroc(ScoredPixels(np.exp(sp.scores), sp.labels)) == pytest.approx(base, abs=1e-12)


class TestAveragePrecision:
    def test_perfect_separation(self):
        assert average_precision(ScoredPixels([3.0, 2.0, 1.0, 0.0], [1, 1, 0, 0])) == 1.0

    def test_single_positive_ranked_last(self):
        n = 8
        scores = np.arange(n, dtype=float)
        labels = np.zeros(n, dtype=int)
        labels[0] = 1  # lowest score
        assert average_precision(ScoredPixels(scores, labels)) == pytest.approx(1.0 / n)

    def test_no_positives_rejected(self):
        with pytest.raises(MetricUndefinedError):
            average_precision(ScoredPixels([0.3, 0.4], [0, 0]))

    def test_matches_threshold_sweep_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            sp = random_scored(rng, 200)
            assert abs(average_precision(sp)
                       - ap_threshold_sweep_oracle(sp.scores, sp.labels)) <= 1e-10

    def test_random_scores_ap_near_prevalence(self):
        rng = np.random.default_rng(5)
        n, trials = 400, 100
        prevalence = 0.3
        deviations = []
        for _ in range(trials):
            labels = (rng.random(n) < prevalence).astype(int)
            if labels.sum() in (0, n):
                continue
            sp = ScoredPixels(rng.normal(size=n), labels)
            deviations.append(average_precision(sp) - labels.mean())
        deviations = np.asarray(deviations)
        sem = deviations.std(ddof=1) / np.sqrt(len(deviations))
        assert abs(deviations.mean()) <= 3.0 * sem + 5e-3


class TestFpr95:
    def test_perfect_separation(self):
        sp = ScoredPixels([4.0, 3.0, 1.0, 0.5], [1, 1, 0, 0])
        assert fpr_at_95_tpr(sp) == 0.0

    def test_all_identical_scores(self):
        sp = ScoredPixels([1.0, 1.0, 1.0, 1.0], [1, 0, 1, 0])
        assert fpr_at_95_tpr(sp) == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(MetricUndefinedError):
            fpr_at_95_tpr(ScoredPixels([0.1, 0.9], [0, 0]))

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            sp = random_scored(rng, 500)
            assert abs(fpr_at_95_tpr(sp) - fpr95_sweep_oracle(sp.scores, sp.labels)) <= 1e-12

    def test_nonincreasing_under_positive_shift(self):
        rng = np.random.default_rng(17)
        sp = random_scored(rng, 300, tie_prob=0.0)
        previous = fpr_at_95_tpr(sp)
        scores = sp.scores.copy()
        for shift in (0.2, 0.5, 1.0, 3.0):
            shifted = scores + shift * (sp.labels == 1)
            current = fpr_at_95_tpr(ScoredPixels(shifted, sp.labels))
            assert current <= previous + 1e-12
            previous = current


class TestMiouMacc:
    def test_perfect_prediction(self):
        gt = np.array([[0, 1], [2, 3]])
        miou, macc, _ = miou_macc(gt, gt, SPACE)
        assert miou == 1.0 and macc == 1.0

    def test_constant_prediction_closed_form(self):
        gt = np.array([[0, 0], [1, 1]])
        pred = np.zeros((2, 2), dtype=np.int64)
        miou, macc, iou = miou_macc(pred, gt, SPACE)
        assert iou[0] == pytest.approx(0.5)
        assert iou[1] == pytest.approx(0.0)
        assert np.isnan(iou[2]) and np.isnan(iou[3])
        assert miou == pytest.approx(0.25)
        assert macc == pytest.approx(0.5)

    def test_ood_and_ignore_excluded(self):
        gt = np.array([[0, SPACE.ood_id], [SPACE.ignore_id, 1]])
        pred = np.array([[0, 3], [3, 0]])
        miou, macc, iou = miou_macc(pred, gt, SPACE)
        # class 3 predictions fall on excluded pixels only, so class 3 is absent
        assert np.isnan(iou[3])

    def test_matches_confusion_loop_oracle(self):
        rng = np.random.default_rng(19)
        for _ in range(10):
            gt = rng.choice([0, 1, 2, 3, SPACE.ood_id, SPACE.ignore_id], size=(32, 32),
                            p=[0.3, 0.25, 0.2, 0.1, 0.1, 0.05])
            pred = rng.integers(0, 4, size=(32, 32))
            got = miou_macc(pred, gt, SPACE)
            want = miou_loop_oracle(pred, gt, SPACE)
            assert got[0] == pytest.approx(want[0], abs=1e-12)
            assert got[1] == pytest.approx(want[1], abs=1e-12)
            np.testing.assert_allclose(got[2], want[2], atol=1e-12)

    def test_per_class_iou_bounded_by_recall(self):
        rng = np.random.default_rng(23)
        gt = rng.integers(0, 4, size=(16, 16))
        pred = rng.integers(0, 4, size=(16, 16))
        _, _, iou = miou_macc(pred, gt, SPACE)
        conf = np.zeros((4, 4))
        for p, g in zip(pred.ravel(), gt.ravel()):
            conf[g, p] += 1
        recall = np.diag(conf) / conf.sum(axis=1)
        assert (iou <= recall + 1e-12).all()

    def test_batched_maps_accumulate(self):
        rng = np.random.default_rng(29)
        gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        preds = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        merged = miou_macc(preds, gts, SPACE)
        stacked = miou_macc(np.concatenate(preds, axis=0), np.concatenate(gts, axis=0), SPACE)
        assert merged[0] == pytest.approx(stacked[0])
