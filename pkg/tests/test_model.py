import math

import numpy as np
import pytest

from cascade_det.assign import label_boxes, stats_from_targets
from cascade_det.geometry import Box, NormStats, encode, iou_pairs, normalize
from cascade_det.model import (
    DivergenceError,
    FeatureConfig,
    StageModel,
    cross_entropy,
    cross_entropy_grad,
    featurize,
    featurize_boxes,
    fit_classifier,
    fit_regressor,
    predict_delta,
    predict_posteriors,
    predict_scores,
    regress_boxes,
    softmax,
    stage_loss,
)

NOISELESS = FeatureConfig(observation_noise=0.0, noise_growth=0.0)


class TestFeaturize:
    def test_layout(self, small_scenes):
        s = small_scenes[0]
        X = featurize_boxes(s.proposals, s, FeatureConfig())
        assert X.shape == (len(s.proposals), FeatureConfig().dim)
        assert np.all(X[:, -1] == 1.0)
        np.testing.assert_array_equal(X[:, 8:12], X[:, 4:8] ** 2)

    def test_noiseless_observation_is_true_delta(self, small_scenes):
        s = small_scenes[0]
        lab = label_boxes(s.proposals, s.gt_boxes, s.gt_classes, 0.5)
        pos = lab.positive
        X = featurize_boxes(s.proposals[pos], s, NOISELESS)
        np.testing.assert_array_equal(X[:, 4:8], lab.targets[pos])

    def test_deterministic(self, small_scenes):
        s = small_scenes[3]
        box = Box.from_array(s.proposals[5])
        a, b = featurize(box, s, FeatureConfig()), featurize(box, s, FeatureConfig())
        assert a.tobytes() == b.tobytes()

    def test_row_independent_of_batch(self, small_scenes):
        s = small_scenes[3]
        full = featurize_boxes(s.proposals, s, FeatureConfig())
        assert full[7].tobytes() == featurize_boxes(s.proposals[7:8], s, FeatureConfig())[0].tobytes()

    def test_seed_changes_noise(self, small_scenes):
        s = small_scenes[3]
        a = featurize_boxes(s.proposals, s, FeatureConfig(seed=1))
        b = featurize_boxes(s.proposals, s, FeatureConfig(seed=2))
        assert not np.array_equal(a[:, 12:20], b[:, 12:20])

    def test_noise_is_standard_normal(self, small_scenes):
        X = np.concatenate([featurize_boxes(s.proposals, s, FeatureConfig()) for s in small_scenes])
        d = X[:, 12:20].ravel()
        assert abs(d.mean()) < 0.03 and abs(d.std() - 1) < 0.03

    def test_background_observation_uncorrelated(self):
        # boxes kept below IoU 0.3 against a single gt, 10^4 samples
        from cascade_det.data import Scene

        rng = np.random.default_rng(3)
        gt = np.array([[320.0, 240.0, 100.0, 80.0]])
        scene = Scene(0, 640, 480, gt, [1], np.zeros((0, 4)))
        boxes = np.c_[rng.uniform(60, 580, 20000), rng.uniform(60, 420, 20000), rng.uniform(20, 120, (20000, 2))]
        boxes = boxes[iou_pairs(boxes, np.repeat(gt, len(boxes), 0)) < 0.3][:10000]
        assert len(boxes) == 10000
        X = featurize_boxes(boxes, scene, FeatureConfig())
        truth = encode(boxes, np.repeat(gt, len(boxes), 0))
        for j in range(4):
            assert abs(np.corrcoef(X[:, 4 + j], truth[:, j])[0, 1]) < 0.1


class TestRegressor:
    def test_zero_targets(self):
        X = np.random.default_rng(0).normal(size=(50, 5))
        assert np.abs(fit_regressor(X, np.zeros((50, 4)), 1e-3)).max() < 1e-8

    def test_one_dimensional_by_hand(self):
        # w = sum(xy) / (sum(x^2) + ridge) = 28 / 14
        w = fit_regressor(np.array([[1.0], [2.0], [3.0]]), np.array([[2.0], [4.0], [6.0]]), 1e-9)
        assert w[0, 0] == pytest.approx(2.0, abs=1e-6)

    def test_normal_equation_residual(self):
        rng = np.random.default_rng(1)
        X, T = rng.normal(size=(300, 17)), rng.normal(size=(300, 4))
        W = fit_regressor(X, T, 1e-3)
        r = (X.T @ X + 1e-3 * np.eye(17)) @ W - X.T @ T
        assert np.abs(r).max(axis=0).max() < 1e-8

    def test_noiseless_features_reproduce_targets(self, small_scenes):
        Xs, Ts = [], []
        for s in small_scenes:
            lab = label_boxes(s.proposals, s.gt_boxes, s.gt_classes, 0.5)
            Xs.append(featurize_boxes(s.proposals[lab.positive], s, NOISELESS))
            Ts.append(lab.targets[lab.positive])
        X, T = np.concatenate(Xs), np.concatenate(Ts)
        stats = stats_from_targets(T, np.ones(len(T)), 0.5)
        Tn = normalize(T, stats)
        W = fit_regressor(X, Tn, 1e-3)
        assert ((X @ W - Tn) ** 2).sum() / len(X) < 1e-6

    def test_rejects_nonfinite(self):
        X = np.ones((3, 2))
        X[0, 0] = np.nan
        with pytest.raises(ValueError):
            fit_regressor(X, np.zeros((3, 4)))


class TestClassifier:
    def test_zero_weights_uniform(self):
        p = softmax(np.zeros((3, 4)))
        np.testing.assert_allclose(p, 0.25)

    def test_separable_toy(self):
        X = np.array([[0.0, 0.0, 1.0], [0.2, 0.1, 1.0], [2.0, 2.0, 1.0], [2.1, 1.8, 1.0]])
        y = np.array([0, 0, 1, 1])
        W = fit_classifier(X, y, 1, lr=0.1, epochs=500)
        assert (predict_posteriors(StageModel(0.5, np.zeros((3, 4)), W), X).argmax(1) == y).all()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            W = rng.normal(size=(4, 6))
            X = rng.normal(size=(20, 6))
            y = rng.integers(0, 4, 20)
            g = cross_entropy_grad(W, X, y)
            i, j = rng.integers(0, 4), rng.integers(0, 6)
            E = np.zeros_like(W)
            E[i, j] = 1e-5
            fd = (cross_entropy(W + E, X, y) - cross_entropy(W - E, X, y)) / 2e-5
            worst = max(worst, abs(fd - g[i, j]) / max(abs(fd), abs(g[i, j]), 1e-8))
        assert worst < 1e-5

    def test_loss_non_increasing(self, small_scenes):
        X = np.concatenate([featurize_boxes(s.proposals, s, FeatureConfig()) for s in small_scenes[:10]])
        y = np.concatenate([label_boxes(s.proposals, s.gt_boxes, s.gt_classes, 0.5).labels for s in small_scenes[:10]])
        hist = []
        fit_classifier(X, y, 3, lr=0.1, epochs=300, history=hist)
        assert len(hist) == 301
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_folded_weights_match_standardized_training(self):
        rng = np.random.default_rng(4)
        X = np.c_[rng.normal(3, 2, 200), rng.normal(-1, 0.1, 200), np.ones(200)]
        y = (X[:, 0] + 10 * X[:, 1] > -7).astype(int)
        W = fit_classifier(X, y, 1, lr=0.5, epochs=200)
        hist = []
        fit_classifier(X, y, 1, lr=0.5, epochs=200, history=hist)
        assert cross_entropy(W, X, y) == pytest.approx(hist[-1], rel=1e-9)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_named(self):
        X = np.array([[1.0, 1.0], [-1.0, 1.0]])
        with pytest.raises(DivergenceError, match="step 1"):
            fit_classifier(X, np.array([0, 1]), 1, lr=float("inf"), epochs=5)


class TestStage:
    def _model(self, dim=3):
        rng = np.random.default_rng(5)
        return StageModel(0.5, rng.normal(size=(dim, 4)), rng.normal(size=(3, dim)), NormStats((0.1, 0, 0, 0), (0.5, 1, 1, 2)))

    def test_zero_regressor_predicts_mean(self):
        m = StageModel(0.5, np.zeros((3, 4)), np.zeros((2, 3)), NormStats((0.1, 0.2, 0.3, 0.4), (1, 2, 3, 4)))
        assert predict_delta(m, np.ones(3)).as_tuple() == (0.1, 0.2, 0.3, 0.4)

    def test_posteriors_sum_to_one(self):
        m = self._model()
        P = predict_posteriors(m, np.random.default_rng(6).normal(size=(500, 3)) * 10)
        assert (P >= 0).all()
        assert np.abs(P.sum(1) - 1).max() < 1e-9
        assert predict_scores(m, np.ones(3)).sum() == pytest.approx(1.0, abs=1e-9)

    def test_identity_regressor_keeps_boxes(self):
        m = StageModel.identity(3, 2)
        boxes = np.array([[50.0, 50, 20, 30], [10, 10, 5, 5]])
        np.testing.assert_array_equal(regress_boxes(m, boxes, np.ones((2, 3)), 100, 100), boxes)

    def test_all_background_is_classification_only(self):
        m = self._model()
        X = np.random.default_rng(7).normal(size=(4, 3))
        y = np.zeros(4, dtype=int)
        assert stage_loss(m, X, y, np.full((4, 4), np.nan)) == cross_entropy(m.cls_weights, X, y)

    def test_perfect_model_near_zero_loss(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        W_cls = np.array([[50.0, -50.0], [-50.0, 50.0]])
        stats = NormStats((0, 0, 0, 0), (1, 1, 1, 1))
        targets = np.array([[np.nan] * 4, [0.3, -0.2, 0.1, 0.0]])
        W_reg = np.array([[0, 0, 0, 0], [0.3, -0.2, 0.1, 0.0]])
        loss = stage_loss(StageModel(0.5, W_reg, W_cls, stats), X, np.array([0, 1]), targets)
        assert loss < 1e-40

    def test_two_sample_hand_computation(self):
        # scalar re-derivation of cross-entropy + smooth-L1 on one positive
        X = np.array([[1.0, 2.0], [0.5, -1.0]])
        y = np.array([0, 2])
        W_cls = np.array([[0.1, 0.2], [0.0, -0.3], [0.4, 0.1]])
        W_reg = np.array([[0.2, 0.0, -0.1, 0.3], [0.1, 0.5, 0.0, -0.2]])
        stats = NormStats((0.0, 0.1, 0.0, 0.0), (0.5, 0.5, 1.0, 2.0))
        targets = np.array([[np.nan] * 4, [0.4, -0.3, 0.2, 1.0]])

        def log_softmax(z, k):
            m = max(z)
            return z[k] - (m + math.log(sum(math.exp(v - m) for v in z)))

        ce = 0.0
        for i in range(2):
            z = [sum(W_cls[c][j] * X[i][j] for j in range(2)) for c in range(3)]
            ce -= log_softmax(z, y[i])
        ce /= 2
        reg = 0.0
        for c in range(4):
            t = (targets[1][c] - stats.mean[c]) / stats.std[c]
            p = sum(X[1][j] * W_reg[j][c] for j in range(2))
            r = abs(t - p)
            reg += 0.5 * r * r if r < 1 else r - 0.5
        got = stage_loss(StageModel(0.5, W_reg, W_cls, stats), X, y, targets)
        assert got == pytest.approx(ce + reg, abs=1e-10)

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            StageModel(0.5, np.zeros((3, 4)), np.zeros((2, 4)))
