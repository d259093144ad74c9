import numpy as np
import pytest

from afa_ssr.toy.metrics import confusion_matrix, evaluate_boundary_f1, evaluate_miou


def test_perfect_prediction():
    lab = np.random.default_rng(0).integers(0, 4, (3, 8, 8))
    iou, miou = evaluate_miou(lab, lab, 4)
    assert miou == 1.0 and np.all(iou == 1.0)


def test_disjoint_single_class():
    pred, lab = np.zeros((4, 4), dtype=int), np.ones((4, 4), dtype=int)
    iou, miou = evaluate_miou(pred, lab, 3)
    assert iou[0] == 0.0 and iou[1] == 0.0
    assert np.isnan(iou[2])  # absent from both, left out of the mean
    assert miou == 0.0


def test_random_case_matches_hand_loop():
    rng = np.random.default_rng(1)
    pred, lab = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
    cm = np.zeros((3, 3), dtype=int)
    for p, t in zip(pred.ravel(), lab.ravel()):
        cm[t, p] += 1
    np.testing.assert_array_equal(confusion_matrix(pred, lab, 3), cm)
    ious = []
    for c in range(3):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        ious.append(tp / (tp + fp + fn))
    iou, miou = evaluate_miou(pred, lab, 3)
    np.testing.assert_allclose(iou, ious)
    assert miou == pytest.approx(np.mean(ious))


def test_out_of_range_labels():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(3, dtype=int), np.array([0, 1, 5]), 3)


class TestBoundaryF1:
    def test_perfect(self):
        t = np.zeros((8, 8))
        t[3, 1:7] = 1
        assert evaluate_boundary_f1(t, t) == (1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        t = np.zeros((5, 5))
        t[2, 2] = 1
        p, r, f = evaluate_boundary_f1(np.zeros((5, 5)), t)
        assert r == 0.0 and f == 0.0

    def test_one_pixel_shift_within_radius(self):
        t = np.zeros((10, 10))
        t[4, 2:8] = 1
        t[2:8, 6] = 1
        shifted = np.roll(np.roll(t, 1, axis=0), 1, axis=1)
        assert evaluate_boundary_f1(shifted, t, radius=1)[2] == 1.0
        assert evaluate_boundary_f1(np.roll(t, 2, axis=0), t, radius=1)[2] < 1.0

    def test_direct_neighbourhood_check(self):
        rng = np.random.default_rng(2)
        prob, t = rng.uniform(size=(9, 9)), rng.uniform(size=(9, 9)) < 0.15
        pred = prob >= 0.5

        def near(mask, y, x):
            return mask[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].any()

        tp_p = sum(near(t, y, x) for y, x in zip(*np.nonzero(pred)))
        tp_r = sum(near(pred, y, x) for y, x in zip(*np.nonzero(t)))
        p, r, _ = evaluate_boundary_f1(prob, t)
        assert p == pytest.approx(tp_p / pred.sum())
        assert r == pytest.approx(tp_r / t.sum())

    def test_both_empty(self):
        assert evaluate_boundary_f1(np.zeros((3, 3)), np.zeros((3, 3)))[2] == 1.0
