"""
ハイパーグリッド環境のテスト
"""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from DoubleGFN.config import EnvConfig
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import Action, GridState, TerminalState
from DoubleGFN.utils import EmptyModeSetError, IllegalActionError, StateOutOfBoundsError


def grid(dim, side):
    return Hypergrid(EnvConfig(dim=dim, side=side))


class TestTransitions:

    def test_initial_state(self):
        assert grid(2, 8).initial_state() == GridState.of(0, 0)
        assert grid(6, 8).initial_state().coords == (0,) * 6
        assert grid(1, 2).initial_state() == GridState.of(0)

    def test_valid_actions(self):
        env = grid(2, 3)
        assert_array_equal(env.valid_actions(GridState.of(2, 0)), [False, True, True])
        assert_array_equal(env.valid_actions(GridState.of(2, 2)), [False, False, True])
        assert_array_equal(env.valid_actions(env.initial_state()), [True, True, True])

    def test_valid_actions_out_of_bounds(self):
        with pytest.raises(StateOutOfBoundsError):
            grid(2, 3).valid_actions(GridState.of(3, 0))
        with pytest.raises(StateOutOfBoundsError):
            grid(2, 3).valid_actions(GridState.of(0, 0, 0))

    def test_parents_mask(self):
        env = grid(2, 3)
        assert_array_equal(env.parents_mask(GridState.of(1, 0)), [True, False])
        assert_array_equal(env.parents_mask(env.initial_state()), [False, False])
        assert_array_equal(env.parents_mask(GridState.of(2, 2)), [True, True])

    def test_step(self):
        env = grid(2, 3)
        assert env.step(GridState.of(0, 0), Action.increment(1)) == GridState.of(0, 1)
        assert env.step(GridState.of(1, 2), Action.terminate()) == TerminalState(GridState.of(1, 2))

    def test_illegal_step(self):
        with pytest.raises(IllegalActionError):
            grid(2, 3).step(GridState.of(2, 0), Action.increment(0))

    def test_step_and_parent_are_inverse(self):
        env = grid(3, 4)
        for coords in itertools.product(range(4), repeat=3):
            state = GridState(coords)
            for d in range(3):
                if coords[d] < 3:
                    assert env.parent(env.step(state, Action.increment(d)), d) == state
                if coords[d] > 0:
                    assert env.step(env.parent(state, d), Action.increment(d)) == state

    def test_every_state_reachable(self):
        env = grid(3, 8)
        seen = {env.initial_state()}
        frontier = [env.initial_state()]
        while frontier:
            state = frontier.pop()
            legal = env.valid_actions(state)
            for d in np.flatnonzero(legal[:env.dim]):
                child = env.step(state, Action.increment(int(d)))
                if child not in seen:
                    seen.add(child)
                    frontier.append(child)
        assert len(seen) == env.num_states
        for state in seen:
            if state != env.initial_state():
                assert env.parents_mask(state).any()


class TestReward:

    def test_worked_examples(self):
        env = grid(2, 8)
        assert env.reward(GridState.of(0, 0)) == pytest.approx(0.501)
        assert env.reward(GridState.of(1, 6)) == pytest.approx(2.501)
        assert env.reward(GridState.of(4, 4)) == pytest.approx(1e-3)

    def test_strictly_positive(self):
        env = grid(3, 8)
        assert np.all(env.all_rewards > 0)

    def test_batch_matches_scalar(self):
        env = grid(2, 8)
        coords = env.all_coords()
        for c, r in zip(coords, env.all_rewards):
            assert env.reward(GridState(tuple(int(v) for v in c))) == r


class TestModeSet:

    @pytest.mark.parametrize('side, per_dim', [(8, {1, 6}), (10, {1, 8}), (12, {2, 9})])
    def test_mode_coordinates(self, side, per_dim):
        modes = grid(6, side).mode_set()
        assert len(modes) == 64
        assert {c for m in modes for c in m.coords} == per_dim

    def test_two_dimensional_modes(self):
        modes = grid(2, 8).mode_set()
        assert modes == {GridState.of(a, b) for a in (1, 6) for b in (1, 6)}

    def test_modes_have_full_reward(self):
        env = grid(2, 10)
        for mode in env.mode_set():
            assert env.reward(mode) == pytest.approx(2.501)

    def test_empty_mode_set(self):
        with pytest.raises(EmptyModeSetError):
            grid(2, 2).mode_set()

    def test_threshold_mode_set(self):
        env = grid(2, 8)
        assert env.threshold_mode_set(2.0) == env.mode_set()
        assert len(env.threshold_mode_set(0.5)) == 16
