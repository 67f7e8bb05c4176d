"""
自動微分エンジンと Adam のテスト
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from DoubleGFN.autodiff import (
    AdamState, GradientTape, _Record, adam_step, backward, grad_check, masked_log_softmax_array,
)
from DoubleGFN.utils import NonFiniteError, UnsupportedPrimitiveError


class TestBackward:

    def test_sum_gradient_is_ones(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([0.3, -1.2, 4.0]))
        grads = backward(tape.sum(w), tape)
        assert_allclose(grads['w'], [1.0, 1.0, 1.0])

    def test_chain_rule_on_squared_product(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([2.0]))
        x = tape.constant(np.array([3.0]))
        loss = tape.sum(tape.square(tape.mul(w, x)))
        grads = tape.backward(loss)
        assert_allclose(grads['w'], [36.0])

    def test_detached_parameter_gets_zero_gradient(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([1.0, 2.0]))
        tape.watch('q', np.ones((2, 3)))
        grads = tape.backward(tape.sum(tape.square(w)))
        assert grads['q'].shape == (2, 3)
        assert np.all(grads['q'] == 0.0)

    def test_non_scalar_loss_is_rejected(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            tape.backward(tape.square(w))

    def test_loss_from_other_tape_is_rejected(self):
        other = GradientTape()
        loss = other.sum(other.watch('w', np.ones(2)))
        with pytest.raises(ValueError):
            GradientTape().backward(loss)

    def test_unsupported_primitive(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([1.0]))
        out = tape.constant(np.array(2.0))
        tape._records.append(_Record('mystery', (w.index,), out.index))
        with pytest.raises(UnsupportedPrimitiveError):
            tape.backward(out)

    def test_non_finite_forward_value(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([1e200]))
        with pytest.raises(NonFiniteError):
            tape.square(tape.square(w))

    def test_backward_does_not_mutate_forward_values(self):
        tape = GradientTape()
        w = tape.watch('w', np.array([[0.5, -0.5], [1.5, 2.0]]))
        b = tape.watch('b', np.array([0.1, 0.2]))
        x = tape.constant(np.eye(2))
        h = tape.leaky_relu(tape.affine(x, w, b), 0.01)
        before = h.data.copy()
        tape.backward(tape.sum(tape.square(h)))
        assert_allclose(h.data, before, rtol=0, atol=0)

    def test_cumsum_and_segment_sum(self):
        tape = GradientTape()
        x = tape.watch('x', np.array([1.0, 2.0, 3.0]))
        c = tape.cumsum(x)
        s = tape.segment_sum(c, np.array([0, 0, 1]), 2)
        assert_allclose(s.data, [4.0, 6.0])
        # s0 + 2·s1 = c0 + c1 + 2·c2
        grads = tape.backward(tape.sum(tape.scale(s, np.array([1.0, 2.0]))))
        assert_allclose(grads['x'], [4.0, 3.0, 2.0])


class TestMaskedLogSoftmax:

    def test_probabilities_sum_to_one_and_masked_are_zero(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 4))
        mask = np.array([
            [True, True, True, True],
            [True, False, True, False],
            [False, False, False, True],
            [True, True, False, True],
            [False, True, True, True],
        ])
        probs = np.exp(masked_log_softmax_array(logits, mask))
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs[~mask] == 0.0)

    def test_mask_shape_mismatch(self):
        tape = GradientTape()
        logits = tape.watch('z', np.zeros((2, 3)))
        with pytest.raises(ValueError):
            tape.masked_log_softmax(logits, np.ones((2, 2), dtype=bool))


class TestGradCheck:

    def test_quadratic_form(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])

        def f(tape, leaves):
            w = leaves['w']
            aw = tape.affine(tape.constant(a), w, tape.constant(np.zeros(1)))
            return tape.sum(tape.mul(w, aw))

        assert grad_check(f, {'w': np.array([[0.7], [-1.3]])}, eps=1e-5) < 1e-6

    def test_constant_function(self):
        def f(tape, leaves):
            return tape.constant(np.array(3.0))

        assert grad_check(f, {'w': np.array([1.0, 2.0])}) == 0.0

    def test_mlp_with_masked_head(self):
        rng = np.random.default_rng(7)
        params = {
            'w1': rng.normal(size=(4, 6)) * 0.5,
            'b1': rng.normal(size=6) * 0.1,
            'w2': rng.normal(size=(6, 3)) * 0.5,
            'b2': rng.normal(size=3) * 0.1,
        }
        x = np.eye(4)
        mask = np.array([[True, True, True], [True, False, True], [False, True, True], [True, True, True]])

        def f(tape, leaves):
            h = tape.leaky_relu(tape.affine(tape.constant(x), leaves['w1'], leaves['b1']), 0.01)
            logp = tape.masked_log_softmax(tape.affine(h, leaves['w2'], leaves['b2']), mask)
            picked = tape.gather(logp, np.arange(4), np.array([0, 2, 1, 2]))
            return tape.sum(tape.square(tape.cumsum(picked)))

        assert grad_check(f, params) < 1e-5

    def test_eps_out_of_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda tape, leaves: tape.sum(leaves['w']), {'w': np.ones(2)}, eps=1e-2)


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        params = {'w': np.array([1.0])}
        state = AdamState(lr=1e-3)
        adam_step(params, {'w': np.array([1.0])}, state)
        assert_allclose(params['w'], [0.999], atol=1e-8)
        assert state.t == 1

    def test_zero_gradient_leaves_parameters(self):
        params = {'w': np.array([0.5, -0.25])}
        adam_step(params, {'w': np.zeros(2)}, AdamState())
        assert_allclose(params['w'], [0.5, -0.25], rtol=0, atol=0)

    def test_second_step_similar_magnitude(self):
        params = {'w': np.array([1.0])}
        state = AdamState(lr=1e-3)
        adam_step(params, {'w': np.array([0.4])}, state)
        first = 1.0 - params['w'][0]
        before = params['w'][0]
        adam_step(params, {'w': np.array([0.4])}, state)
        second = before - params['w'][0]
        assert abs(second - first) <= 0.1 * first
        assert state.t == 2

    def test_per_parameter_learning_rate(self):
        params = {'w': np.array([1.0]), 'logZ': np.array([0.0])}
        state = AdamState(lr=1e-3, lr_overrides={'logZ': 1e-1})
        adam_step(params, {'w': np.array([1.0]), 'logZ': np.array([-1.0])}, state)
        assert_allclose(params['logZ'], [0.1], atol=1e-7)

    def test_nan_gradient_names_parameter(self):
        params = {'w': np.array([1.0]), 'v': np.array([1.0])}
        with pytest.raises(NonFiniteError, match='v'):
            adam_step(params, {'w': np.array([1.0]), 'v': np.array([np.nan])}, AdamState())
        assert_allclose(params['w'], [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({'w': np.ones(2)}, {'w': np.ones(3)}, AdamState())
