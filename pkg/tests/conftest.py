"""
共通フィクスチャ
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from DoubleGFN.config import EnvConfig  # noqa: E402
from DoubleGFN.environment import Hypergrid  # noqa: E402
from DoubleGFN.models import Action, Trajectory  # noqa: E402
from DoubleGFN.policy import PolicySet  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 数分単位の学習を含む受け入れ試験")


@pytest.fixture
def small_env():
    """D=2, H=3"""
    return Hypergrid(EnvConfig(dim=2, side=3))


@pytest.fixture
def small_policy(small_env):
    return PolicySet.initialize(small_env, np.random.default_rng(0), hidden_dim=8, num_layers=2,
                                leaky_slope=0.01)


@pytest.fixture
def build_trajectory():
    """アクション番号列から軌跡を作る（最後は終了）"""

    def build(env: Hypergrid, action_indices) -> Trajectory:
        state = env.initial_state()
        states = [state]
        actions = []
        for index in action_indices:
            action = Action.from_index(index, env.dim)
            actions.append(action)
            if action.is_terminate:
                break
            state = env.step(state, action)
            states.append(state)
        return Trajectory(tuple(states), tuple(actions), env.reward(state))

    return build
