import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tissueseg.losses import (
    composite_loss,
    confusion_matrix,
    dynamic_class_weights,
    metrics,
    weighted_ce,
)
from tissueseg.tensor import Tensor, backward


class TestClassWeights:
    def test_imbalanced(self):
        np.testing.assert_allclose(dynamic_class_weights(np.array([0, 0, 1]), 2), [0.75, 1.5])

    def test_balanced_is_one(self):
        np.testing.assert_array_equal(dynamic_class_weights(np.arange(12) % 4, 4), np.ones(4))

    def test_absent_class_gets_zero(self):
        w = dynamic_class_weights(np.array([0, 2, 2, 0]), 3)
        assert w[1] == 0 and w[0] == w[2] == pytest.approx(4 / 6)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
    def test_weighted_counts_equal_n_over_k(self, labels):
        labels = np.array(labels)
        w = dynamic_class_weights(labels, 5)
        counts = np.bincount(labels, minlength=5)
        present = counts > 0
        np.testing.assert_allclose(w[present] * counts[present], len(labels) / 5)
        np.testing.assert_allclose(w, oracles.class_weights(labels, 5), rtol=1e-15)


class TestCrossEntropy:
    def test_confident_correct_prediction(self):
        labels = np.array([[[0, 1], [1, 0]]])
        logits = np.where(np.arange(2)[None, :, None, None] == labels[:, None], 50.0, -50.0)
        assert weighted_ce(Tensor(logits), labels).item() < 1e-12

    @pytest.mark.parametrize("K", [2, 3, 7])
    def test_uniform_logits_give_log_k(self, K):
        labels = np.random.default_rng(K).integers(0, K, size=(2, 3, 3))
        labels.flat[:K] = np.arange(K)
        loss = weighted_ce(Tensor(np.zeros((2, K, 3, 3))), labels).item()
        assert loss == pytest.approx(np.log(K), rel=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            K = int(rng.integers(2, 6))
            logits = rng.normal(size=(2, K, 3, 4)) * 3
            labels = rng.integers(0, K, size=(2, 3, 4))
            w = rng.uniform(0, 2, size=K)
            got = weighted_ce(Tensor(logits), labels, w).item()
            assert got == pytest.approx(oracles.weighted_ce(logits, labels, w, 1e-12), rel=1e-12, abs=1e-14)

    def test_unit_weights_equal_plain_ce(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        plain = -np.take_along_axis(logp, labels[:, None], axis=1).mean()
        assert weighted_ce(Tensor(logits), labels, np.ones(3)).item() == pytest.approx(plain, rel=1e-13)

    def test_weight_scaling_is_linear(self):
        rng = np.random.default_rng(2)
        logits, labels = rng.normal(size=(1, 3, 4, 4)), rng.integers(0, 3, size=(1, 4, 4))
        w = rng.uniform(0.1, 2, size=3)
        a = weighted_ce(Tensor(logits), labels, w).item()
        assert weighted_ce(Tensor(logits), labels, 2.5 * w).item() == pytest.approx(2.5 * a, rel=1e-13)

    def test_finite_difference_gradient(self):
        rng = np.random.default_rng(3)
        logits, labels = rng.normal(size=(1, 3, 3, 3)), rng.integers(0, 3, size=(1, 3, 3))
        x = Tensor(logits, requires_grad=True)
        backward(weighted_ce(x, labels))
        h = 1e-6
        num = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, dn = logits.copy(), logits.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (weighted_ce(Tensor(up), labels).item() - weighted_ce(Tensor(dn), labels).item()) / (2 * h)
        np.testing.assert_allclose(x.grad, num, atol=1e-8)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            weighted_ce(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))


class TestCompositeLoss:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.labels = rng.integers(0, 3, size=(2, 8, 8))
        self.final = Tensor(rng.normal(size=(2, 3, 8, 8)))
        self.init = Tensor(rng.normal(size=(2, 3, 2, 2)))

    def test_zero_aux_weight(self):
        t = composite_loss(self.final, self.init, self.labels, 0.0)
        assert t.total.item() == t.final.item()

    def test_identical_stages(self):
        t = composite_loss(self.final, self.final, self.labels, 0.4)
        assert t.total.item() == pytest.approx(1.4 * t.final.item(), rel=1e-14)

    def test_total_is_final_plus_weighted_aux(self):
        t = composite_loss(self.final, self.init, self.labels, 0.4)
        assert t.total.item() == pytest.approx(t.final.item() + 0.4 * t.aux.item(), rel=1e-14)

    def test_hand_case(self):
        labels = np.array([[[0, 1], [1, 1]]])
        final = np.zeros((1, 2, 2, 2))
        final[0, 0, 0, 0] = np.log(3.0)  # p(correct) = 3/4 at the class-0 pixel
        init = np.zeros((1, 2, 2, 2))
        t = composite_loss(Tensor(final), Tensor(init), labels, 0.5)
        # weights [2, 2/3]; final = (2*ln(4/3) + 3*(2/3)*ln 2) / 4 ; aux = (2 + 2) ln 2 / 4
        exp_final = (2 * np.log(4 / 3) + 2 * np.log(2)) / 4
        assert t.final.item() == pytest.approx(exp_final, rel=1e-13)
        assert t.aux.item() == pytest.approx(np.log(2), rel=1e-13)
        assert t.total.item() == pytest.approx(exp_final + 0.5 * np.log(2), rel=1e-13)

    def test_initial_logits_are_upsampled(self):
        const = Tensor(np.broadcast_to(np.array([1.0, 0.0, -1.0])[None, :, None, None], (2, 3, 2, 2)).copy())
        full = Tensor(np.broadcast_to(const.data[:, :, :1, :1], (2, 3, 8, 8)).copy())
        a = composite_loss(self.final, const, self.labels).aux.item()
        b = composite_loss(self.final, full, self.labels).aux.item()
        assert a == pytest.approx(b, rel=1e-14)


class TestMetrics:
    def test_perfect(self):
        y = np.random.default_rng(0).integers(0, 4, size=(2, 8, 8))
        r = metrics(y, y, 4)
        assert r.accuracy == r.mean_iou == r.mean_dice == 1.0

    def test_disjoint(self):
        r = metrics(np.zeros((4, 4), int), np.ones((4, 4), int), 2)
        assert r.accuracy == 0 and r.mean_iou == 0 and r.mean_dice == 0

    def test_half_overlap(self):
        gt = np.array([[1, 1, 0, 0]])
        pred = np.array([[0, 1, 1, 0]])
        r = metrics(pred, gt, 2)
        assert r.iou[1] == pytest.approx(1 / 3) and r.dice[1] == pytest.approx(1 / 2)
        assert r.accuracy == 0.5

    def test_absent_class_excluded(self):
        r = metrics(np.array([0, 0, 1]), np.array([0, 1, 1]), 4)
        assert r.valid.tolist() == [True, True, False, False]
        assert r.mean_iou == pytest.approx(0.5)

    @settings(max_examples=200)
    @given(st.integers(0, 2**31 - 1))
    def test_dice_iou_identity(self, seed):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(2, 6))
        gt, pred = rng.integers(0, K, size=30), rng.integers(0, K, size=30)
        r = metrics(pred, gt, K)
        v = r.valid
        np.testing.assert_allclose(r.dice[v], 2 * r.iou[v] / (1 + r.iou[v]), rtol=1e-12)
        assert np.all(r.iou <= r.dice + 1e-15)

    def test_confusion_matches_direct_counts(self):
        rng = np.random.default_rng(5)
        gt, pred = rng.integers(0, 4, size=(3, 6, 6)), rng.integers(0, 4, size=(3, 6, 6))
        cm = confusion_matrix(pred, gt, 4)
        r = metrics(pred, gt, 4)
        for c in range(4):
            inter = np.sum((pred == c) & (gt == c))
            union = np.sum((pred == c) | (gt == c))
            assert cm[c].sum() == np.sum(gt == c)
            assert r.iou[c] == pytest.approx(inter / union)
            assert r.dice[c] == pytest.approx(2 * inter / (np.sum(pred == c) + np.sum(gt == c)))

    def test_report_dict_keys(self):
        d = metrics(np.array([0, 1]), np.array([0, 1]), 2).to_dict()
        assert {"accuracy", "miou", "dice", "per_class.0.iou", "per_class.1.dice"} <= set(d)
