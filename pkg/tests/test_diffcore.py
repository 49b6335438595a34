import math

import numpy as np
import pytest

import properties
from newsrec import diffcore as dc
from newsrec.diffcore import AdamState, Tensor, adam_step, finite_difference_check
from newsrec.errors import (
    ContractError,
    DegenerateMaskError,
    DegenerateVectorError,
    DomainError,
    ShapeError,
)
from newsrec.objectives import focal_loss, positive_probability


def triple_loop_matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[2.0, -1.0], [0.5, 3.0]], dtype=np.float32)
        out = dc.matmul(Tensor(np.eye(2, dtype=np.float32)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matches_triple_loop_oracle(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0], [6.0]]
        out = dc.matmul(Tensor(a), Tensor(b))
        assert out.data.tolist() == triple_loop_matmul(a, b) == [[17.0], [39.0]]

    def test_zero_operand(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
        out = dc.matmul(a, Tensor(np.zeros((4, 2), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2), dtype=np.float32))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmaxMasked:
    def test_uniform_on_equal_scores(self):
        out = dc.softmax_masked(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_log_ratio_case(self):
        out = dc.softmax_masked(Tensor(np.array([math.log(2.0), 0.0])))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-9)

    def test_single_unmasked_entry(self):
        out = dc.softmax_masked(Tensor([5.0, 9.0]), np.array([True, False]))
        assert out.data.tolist() == [1.0, 0.0]

    def test_fully_masked_row_rejected(self):
        with pytest.raises(DegenerateMaskError):
            dc.softmax_masked(Tensor([[1.0, 2.0]]), np.array([False, False]))


class TestElementwise:
    def test_tanh_odd(self):
        assert float(dc.tanh(Tensor(0.0))) == 0.0

    def test_log_exp_inverse(self):
        assert abs(float(dc.log(dc.exp(Tensor(np.float64(1.5))))) - 1.5) < 1e-12

    def test_add_direct(self):
        out = dc.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_log_domain(self):
        with pytest.raises(DomainError):
            dc.log(Tensor([1.0, -1.0]))

    def test_dispatcher(self):
        assert float(dc.elementwise("scale", Tensor(3.0), 2.0)) == 6.0
        with pytest.raises(ContractError):
            dc.elementwise("pow", Tensor(3.0))


class TestConcatLast:
    def test_single_part(self):
        a = Tensor([1.0, 2.0])
        np.testing.assert_array_equal(dc.concat_last([a]).data, a.data)

    def test_direct_construction(self):
        out = dc.concat_last([Tensor([1.0, 2.0]), Tensor([3.0])])
        assert out.data.tolist() == [1.0, 2.0, 3.0]

    def test_shape_disagreement(self):
        with pytest.raises(ShapeError):
            dc.concat_last([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])


class TestL2Normalize:
    def test_pythagorean(self):
        out = dc.l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-7)

    def test_idempotent_on_unit_vector(self):
        v = dc.l2_normalize(Tensor([1.0, 1.0, -2.0]))
        again = dc.l2_normalize(v)
        np.testing.assert_allclose(again.data, v.data, atol=1e-6)

    def test_degenerate(self):
        with pytest.raises(DegenerateVectorError):
            dc.l2_normalize(Tensor([0.0, 0.0]))


class TestMeanPool:
    def test_all_unmasked(self):
        out = dc.mean_pool(Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert out.data.tolist() == [2.0, 3.0]

    def test_single_unmasked_row(self):
        out = dc.mean_pool(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([False, True]))
        assert out.data.tolist() == [3.0, 4.0]

    def test_all_masked_gives_zeros(self):
        out = dc.mean_pool(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([False, False]))
        assert out.data.tolist() == [0.0, 0.0]


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        dc.mul(x, x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-6)

    def test_constant_loss_leaves_grads_empty(self):
        p = Tensor([1.0], requires_grad=True)
        Tensor(5.0).backward()
        assert p.grad is None

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        loss = dc.mul(x, x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0], atol=1e-6)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).backward()

    def test_composite_attention_expression_matches_fd(self):
        properties.check_gradients_match_central_differences(99, 20)


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        err = finite_difference_check(
            lambda t: dc.mul(t, t).sum(), Tensor(np.array([3.0])), eps=1e-3
        )
        assert err <= 1e-5

    def test_focal_softmax_chain(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=5)

        def f(x):
            pos = dc.reshape(dc.take_rows(dc.reshape(x, (-1, 1)), np.array([0])), ())
            negs = dc.reshape(dc.take_rows(dc.reshape(x, (-1, 1)), np.arange(1, 5)), (4,))
            return focal_loss(positive_probability(pos, negs), 0.25, 2.0)

        err = finite_difference_check(f, Tensor(scores), eps=1e-3)
        assert err <= 1e-3

    def test_full_model_loss_one_sample_float32(self, full_model_probe):
        f, emb = full_model_probe(n_samples=1, seed=11)
        err = finite_difference_check(f, emb, eps=1e-3)
        assert err <= 1e-2


class TestAdam:
    def _single(self, value, grad):
        params = {"p": Tensor(np.array([value], dtype=np.float32), requires_grad=True)}
        grads = {"p": np.array([grad], dtype=np.float32)}
        state = AdamState.for_params(params)
        return params, grads, state

    def test_zero_gradient_leaves_params(self):
        params, grads, state = self._single(1.0, 0.0)
        adam_step(params, grads, state, lr=0.1)
        assert float(params["p"].data[0]) == 1.0
        assert state.step == 1

    def test_first_step_matches_hand_computation(self):
        params, grads, state = self._single(1.0, 1.0)
        adam_step(params, grads, state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        delta = 1.0 - float(params["p"].data[0])
        assert abs(delta - 0.1) <= 1e-6

    def test_zero_lr(self):
        params, grads, state = self._single(1.0, 3.0)
        adam_step(params, grads, state, lr=0.0)
        assert float(params["p"].data[0]) == 1.0

    def test_shape_mismatch(self):
        params = {"p": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)}
        state = AdamState.for_params(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"p": np.zeros(3, dtype=np.float32)}, state, lr=0.1)

    def test_step_counter_increments(self):
        params, grads, state = self._single(1.0, 1.0)
        for expected in (1, 2, 3):
            adam_step(params, grads, state, lr=0.01)
            assert state.step == expected


class TestInvariantSuites:
    def test_gradients(self):
        properties.check_gradients_match_central_differences(0, 20)

    def test_softmax_rows(self):
        properties.check_softmax_rows_normalized(0, 50)

    def test_matmul_associativity(self):
        properties.check_matmul_associative(0, 50)

    def test_l2_idempotence(self):
        properties.check_l2_normalize_idempotent(0, 50)

    def test_finite_outputs(self):
        properties.check_ops_finite_on_finite_inputs(0, 50)
