import math

import numpy as np
import pytest

import properties
from newsrec import diffcore as dc
from newsrec.diffcore import Tensor
from newsrec.errors import ConfigError, ContractError, ShapeError
from newsrec.objectives import (
    LossConfig,
    click_score,
    click_scores,
    contrastive_loss,
    focal_loss,
    positive_probability,
    recommendation_loss,
    total_loss,
)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma, cfg.temperature, cfg.lambda_cl, cfg.negatives) == (
            0.25,
            2.0,
            0.1,
            0.1,
            4,
        )

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"alpha": 0.0},
            {"alpha": 1.5},
            {"gamma": -1.0},
            {"temperature": 0.0},
            {"lambda_cl": -0.1},
            {"negatives": 0},
        ],
    )
    def test_bounds(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)


class TestClickScore:
    def test_orthogonal(self):
        assert float(click_score(Tensor([1.0, 0.0]), Tensor([0.0, 2.0]))) == 0.0

    def test_self_product_is_squared_norm(self):
        q = Tensor([1.0, 2.0, 2.0])
        assert float(click_score(q, q)) == pytest.approx(9.0)

    def test_direct_arithmetic(self):
        assert float(click_score(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))) == 11.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            click_score(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_batched_matches_scalar(self, rng):
        users = rng.normal(size=(3, 4)).astype(np.float32)
        cands = rng.normal(size=(3, 5, 4)).astype(np.float32)
        grid = click_scores(Tensor(users), Tensor(cands)).data
        for b in range(3):
            for c in range(5):
                assert grid[b, c] == pytest.approx(
                    float(click_score(Tensor(users[b]), Tensor(cands[b, c]))), abs=1e-5
                )


class TestPositiveProbability:
    def test_symmetric_case_is_fifth(self):
        for common in (0.0, -3.0, 17.5):
            p = float(positive_probability(common, [common] * 4))
            assert abs(p - 0.2) <= 1e-9

    def test_formula_value(self):
        p = float(positive_probability(1.0, [0.0, 0.0, 0.0, 0.0]))
        assert p == pytest.approx(math.e / (math.e + 4.0), abs=1e-9)

    def test_saturation(self):
        p = float(positive_probability(50.0, [0.0, 0.0]))
        assert p >= 1.0 - 1e-8

    def test_empty_negatives_rejected(self):
        with pytest.raises(ContractError):
            positive_probability(1.0, [])


class TestFocalLoss:
    def test_perfect_prediction(self):
        assert float(focal_loss(1.0, 0.25, 2.0)) == 0.0

    def test_gamma_zero_is_cross_entropy(self):
        for p in (0.2, 0.5, 0.9):
            assert float(focal_loss(p, 1.0, 0.0)) == pytest.approx(-math.log(p), abs=1e-12)

    def test_reference_value(self):
        # -0.25 * (1 - 0.5)^2 * ln(0.5)
        expected = 0.25 * 0.25 * math.log(2.0)
        assert float(focal_loss(0.5, 0.25, 2.0)) == pytest.approx(expected, abs=1e-9)
        assert float(focal_loss(0.5, 0.25, 2.0)) == pytest.approx(0.043322, abs=1e-6)

    def test_probability_above_one_rejected(self):
        with pytest.raises(ContractError):
            focal_loss(1.01, 0.25, 2.0)


class TestRecommendationLoss:
    def test_symmetric_sample_reference_value(self):
        scores = Tensor(np.zeros((1, 5), dtype=np.float32))
        # focal(0.2) = 0.25 * 0.64 * ln 5
        expected = 0.25 * 0.64 * math.log(5.0)
        assert float(recommendation_loss(scores, 0.25, 2.0)) == pytest.approx(
            expected, abs=1e-9
        )

    def test_saturated_positives_vanish(self):
        scores = np.zeros((3, 5), dtype=np.float32)
        scores[:, 0] = 60.0
        assert float(recommendation_loss(Tensor(scores), 0.25, 2.0)) <= 1e-6

    def test_duplicated_sample_keeps_mean(self, rng):
        row = rng.normal(size=(1, 5)).astype(np.float32)
        one = float(recommendation_loss(Tensor(row), 0.25, 2.0))
        two = float(recommendation_loss(Tensor(np.vstack([row, row])), 0.25, 2.0))
        assert two == pytest.approx(one, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            recommendation_loss(Tensor(np.zeros((0, 5), dtype=np.float32)))


class TestContrastiveLoss:
    def test_single_pair_is_exactly_zero(self):
        v = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
        assert float(contrastive_loss(v, v, 0.1)) == 0.0

    def test_two_aligned_orthogonal_pairs(self):
        eye = Tensor(np.eye(2, dtype=np.float32))
        expected = math.log1p(math.exp(-10.0))
        assert float(contrastive_loss(eye, eye, 0.1)) == pytest.approx(expected, abs=1e-10)

    def test_five_aligned_pairs_unit_temperature(self):
        eye = Tensor(np.eye(5, dtype=np.float32))
        expected = -math.log(math.e / (math.e + 4.0))
        assert float(contrastive_loss(eye, eye, 1.0)) == pytest.approx(expected, abs=1e-10)

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            contrastive_loss(
                Tensor(np.eye(2, dtype=np.float32)), Tensor(np.eye(3, dtype=np.float32)), 0.1
            )

    def test_non_normalized_rejected(self):
        bad = Tensor(np.array([[2.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        with pytest.raises(ContractError):
            contrastive_loss(bad, bad, 0.1)


class TestTotalLoss:
    def test_zero_weight_keeps_recommendation_term(self):
        l_rec = Tensor(np.float64(0.5))
        l_cl = Tensor(np.float64(9.0))
        assert float(total_loss(l_rec, l_cl, 0.0)) == 0.5

    def test_weighted_sum(self):
        out = total_loss(Tensor(np.float64(0.5)), Tensor(np.float64(0.2)), 0.1)
        assert float(out) == pytest.approx(0.52, abs=1e-12)

    def test_gradient_splits_by_weight(self):
        l_rec = Tensor(np.float64(0.5), requires_grad=True)
        l_cl = Tensor(np.float64(0.2), requires_grad=True)
        total_loss(l_rec, l_cl, 0.1).backward()
        assert float(l_rec.grad) == 1.0
        assert float(l_cl.grad) == pytest.approx(0.1)


class TestInvariantSuites:
    def test_shift_invariance(self):
        properties.check_probability_shift_invariance(0, 50)

    def test_focal_monotone(self):
        properties.check_focal_monotone(0, 20)

    def test_contrastive_permutation(self):
        properties.check_contrastive_permutation_invariance(0, 50)

    def test_contrastive_temperature(self):
        properties.check_contrastive_temperature_ordering(0, 50)

    def test_loss_gradients(self):
        properties.check_loss_gradients(0, 20)
