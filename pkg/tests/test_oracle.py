"""
厳密計算オラクルのテスト
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from DoubleGFN.autodiff import GradientTape
from DoubleGFN.config import EnvConfig
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import FlowAssignment, GridState
from DoubleGFN.objectives import tb_loss
from DoubleGFN.oracle import (
    all_trajectories, balanced_flows, check_flow_balance, enumerate_trajectories, fit_trajectory_balance,
    oracle_l1, sampler_distribution, target_distribution,
)
from DoubleGFN.policy import PolicySet
from DoubleGFN.utils import OracleSizeError


def grid(dim, side):
    return Hypergrid(EnvConfig(dim=dim, side=side))


def uniform_policy(env):
    policy = PolicySet.initialize(env, np.random.default_rng(0), 8, 2, 0.01)
    policy.params['pf.weight'][:] = 0.0
    policy.params['pf.bias'][:] = 0.0
    return policy


def balanced_line_policy(env):
    """D=1 で TB を厳密に満たす方策（トランクは one-hot を素通し）"""
    policy = PolicySet.initialize(env, np.random.default_rng(0), env.side, 1, 0.01)
    policy.params['trunk.0.weight'][:] = np.eye(env.side)
    policy.params['trunk.0.bias'][:] = 0.0
    rewards = env.all_rewards
    flows = np.cumsum(rewards[::-1])[::-1]
    stop = rewards / flows
    logits = np.zeros((env.side, 2))
    logits[:, 0] = np.log(np.maximum(1.0 - stop, 1e-300))
    logits[:, 1] = np.log(stop)
    policy.params['pf.weight'][:] = logits
    policy.params['pf.bias'][:] = 0.0
    policy.params['logZ'][0] = np.log(rewards.sum())
    return policy


class TestTargetDistribution:

    def test_two_states(self):
        assert_allclose(target_distribution(grid(1, 2)).probs, [0.5, 0.5])

    def test_normalized(self):
        assert target_distribution(grid(3, 8)).probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mode_mass(self):
        env = grid(2, 8)
        table = target_distribution(env)
        z = env.all_rewards.sum()
        for mode in env.mode_set():
            assert table.prob(mode) == pytest.approx(2.501 / z)


class TestSamplerDistribution:

    def test_uniform_two_states(self):
        env = grid(1, 2)
        assert_allclose(sampler_distribution(uniform_policy(env), env).probs, [0.5, 0.5])

    def test_always_terminate(self):
        env = grid(2, 4)
        policy = uniform_policy(env)
        policy.params['pf.bias'][-1] = 1e9
        probs = sampler_distribution(policy, env).probs
        assert probs[0] == pytest.approx(1.0)
        assert probs[1:].sum() == pytest.approx(0.0)

    @pytest.mark.parametrize('dim, side', [(2, 3), (3, 4), (2, 8)])
    def test_sums_to_one(self, dim, side):
        env = grid(dim, side)
        policy = PolicySet.initialize(env, np.random.default_rng(dim + side), 8, 2, 0.01)
        assert sampler_distribution(policy, env).probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_conservation_over_random_draws(self):
        env = grid(3, 6)
        rng = np.random.default_rng(123)
        for _ in range(100):
            policy = PolicySet.initialize(env, rng, 8, 2, 0.01)
            assert abs(sampler_distribution(policy, env).probs.sum() - 1.0) < 1e-9

    def test_oracle_l1_of_target_matching_policy(self):
        env = grid(1, 5)
        assert oracle_l1(balanced_line_policy(env), env) < 1e-12


class TestEnumeration:

    def test_path_counts(self):
        trajectories = all_trajectories(grid(2, 2))
        terminals = [t.terminal for t in trajectories]
        assert len(set(terminals)) == 4
        assert terminals.count(GridState.of(1, 1)) == 2
        assert len(all_trajectories(grid(2, 3))) == 19

    def test_probabilities_sum_to_one(self, small_env, small_policy):
        enumeration = enumerate_trajectories(small_policy, small_env)
        assert enumeration.total_probability == pytest.approx(1.0, abs=1e-12)

    def test_uniform_line(self):
        env = grid(1, 3)
        enumeration = enumerate_trajectories(uniform_policy(env), env)
        assert enumeration.terminal.prob(GridState.of(2)) == pytest.approx(0.25)

    def test_agrees_with_dynamic_programming(self):
        env = grid(2, 4)
        for seed in range(20):
            policy = PolicySet.initialize(env, np.random.default_rng(seed), 8, 2, 0.01)
            enumerated = enumerate_trajectories(policy, env).terminal.probs
            assert_allclose(enumerated, sampler_distribution(policy, env).probs, atol=1e-9)

    @pytest.mark.parametrize('dim, side', [(3, 2), (2, 5)])
    def test_size_guard(self, dim, side):
        with pytest.raises(OracleSizeError):
            all_trajectories(grid(dim, side))


class TestFlowBalance:

    def test_balanced_construction(self):
        env = grid(2, 4)
        assert check_flow_balance(balanced_flows(env), env) < 1e-9

    def test_perturbed_edge(self):
        env = grid(2, 3)
        flows = balanced_flows(env)
        edge = (GridState.of(0, 0), GridState.of(1, 0))
        flows.edge_flows[edge] += 0.1
        assert check_flow_balance(flows, env) >= 0.1 - 1e-12

    def test_zero_flows(self):
        env = grid(2, 3)
        assert check_flow_balance(FlowAssignment(), env) == pytest.approx(env.all_rewards.max())


class TestSoundness:

    def test_zero_trajectory_balance_implies_target(self):
        env = grid(1, 3)
        policy = balanced_line_policy(env)
        tape = GradientTape()
        _, report = tb_loss(tape, tape.watch_all(policy.params), policy, env, all_trajectories(env))
        assert report.loss < 1e-24
        assert oracle_l1(policy, env) < 1e-6

    def test_direct_fit(self):
        env = grid(1, 3)
        policy = PolicySet.initialize(env, np.random.default_rng(0), 16, 2, 0.01)
        policy, loss = fit_trajectory_balance(policy, env, max_steps=3000)
        assert loss < 1e-6
        assert oracle_l1(policy, env) < 1e-2

    @pytest.mark.slow
    @pytest.mark.parametrize("dim", [1, 2])
    def test_direct_fit_to_tolerance(self, dim):
        env = grid(dim, 3)
        policy = PolicySet.initialize(env, np.random.default_rng(1), 16, 2, 0.01)
        policy, loss = fit_trajectory_balance(policy, env)
        assert loss < 1e-8
        assert oracle_l1(policy, env) < 1e-3
