"""
ハイパーグリッド環境
DAG 環境の抽象と報酬・合法手・親状態・モード集合
"""

import itertools
from functools import cached_property
from typing import FrozenSet, List, Union

import numpy as np

from DoubleGFN.config import EnvConfig
from DoubleGFN.constants import MAX_ENUMERABLE_STATES
from DoubleGFN.models import GridState, Action, TerminalState
from DoubleGFN.utils import (
    StateOutOfBoundsError, IllegalActionError, EmptyModeSetError, OracleSizeError,
)


def mode_coordinates(side: int) -> List[int]:
    """1次元あたりのモード座標（0.3 < |x/(H−1) − 0.5| < 0.4）"""
    values = []
    for x in range(side):
        centered = abs(x / (side - 1) - 0.5)
        if 0.3 < centered < 0.4:
            values.append(x)
    return values


class Hypergrid:
    """D 次元・一辺 H のハイパーグリッド"""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.dim = config.dim
        self.side = config.side
        self.num_actions = config.dim + 1

    # === 基本情報 ===

    @property
    def num_states(self) -> int:
        return self.side ** self.dim

    @property
    def max_trajectory_length(self) -> int:
        """終了を含む最大アクション数"""
        return self.dim * (self.side - 1) + 1

    @cached_property
    def strides(self) -> np.ndarray:
        """行優先の平坦化係数"""
        return self.side ** np.arange(self.dim - 1, -1, -1, dtype=np.int64)

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """座標 [..., D] -> 平坦インデックス"""
        return np.asarray(coords, dtype=np.int64) @ self.strides

    def coords_of(self, indices) -> np.ndarray:
        """平坦インデックス -> 座標 [..., D]"""
        indices = np.asarray(indices, dtype=np.int64)
        return (indices[..., None] // self.strides) % self.side

    def all_coords(self) -> np.ndarray:
        """全状態の座標（辞書式順）"""
        if self.num_states > MAX_ENUMERABLE_STATES:
            raise OracleSizeError(f"状態数 {self.num_states} が上限 {MAX_ENUMERABLE_STATES} を超えています")
        return np.indices((self.side,) * self.dim, dtype=np.int64).reshape(self.dim, -1).T

    def check_bounds(self, state: GridState):
        if len(state.coords) != self.dim or any(c < 0 or c >= self.side for c in state.coords):
            raise StateOutOfBoundsError(f"範囲外の状態です: {state.coords} (D={self.dim}, H={self.side})")

    # === 環境操作 ===

    def initial_state(self) -> GridState:
        """原点 (0,...,0)"""
        return GridState((0,) * self.dim)

    def valid_actions(self, state: GridState) -> np.ndarray:
        """合法手マスク（長さ D+1、終了は常に合法）"""
        self.check_bounds(state)
        return self.valid_actions_array(np.asarray([state.coords]))[0]

    def valid_actions_array(self, coords: np.ndarray) -> np.ndarray:
        """合法手マスクのバッチ版 [N, D+1]"""
        coords = np.asarray(coords)
        mask = np.ones((coords.shape[0], self.num_actions), dtype=bool)
        mask[:, :self.dim] = coords < self.side - 1
        return mask

    def parents_mask(self, state: GridState) -> np.ndarray:
        """親状態マスク（長さ D、座標が正の次元）"""
        self.check_bounds(state)
        return self.parents_mask_array(np.asarray([state.coords]))[0]

    @staticmethod
    def parents_mask_array(coords: np.ndarray) -> np.ndarray:
        """親状態マスクのバッチ版 [N, D]"""
        return np.asarray(coords) > 0

    def step(self, state: GridState, action: Action) -> Union[GridState, TerminalState]:
        """遷移（終了なら TerminalState）"""
        self.check_bounds(state)
        if action.is_terminate:
            return TerminalState(state)
        d = action.dim
        if not (0 <= d < self.dim) or state.coords[d] >= self.side - 1:
            raise IllegalActionError(f"状態 {state.coords} で Increment({d}) は実行できません")
        coords = list(state.coords)
        coords[d] += 1
        return GridState(tuple(coords))

    def parent(self, state: GridState, d: int) -> GridState:
        """次元 d を戻した親状態"""
        self.check_bounds(state)
        if state.coords[d] <= 0:
            raise IllegalActionError(f"状態 {state.coords} に次元 {d} の親はありません")
        coords = list(state.coords)
        coords[d] -= 1
        return GridState(tuple(coords))

    # === 報酬 ===

    def reward(self, state: GridState) -> float:
        """R(x) = R0 + R1·∏1[0.25<|u-0.5|] + R2·∏1[0.3<|u-0.5|<0.4], u = x/(H-1)"""
        self.check_bounds(state)
        return float(self.rewards_array(np.asarray([state.coords]))[0])

    def rewards_array(self, coords: np.ndarray) -> np.ndarray:
        """報酬のバッチ版"""
        centered = np.abs(np.asarray(coords, dtype=np.float64) / (self.side - 1) - 0.5)
        outer = np.all(centered > 0.25, axis=-1)
        ring = np.all((centered > 0.3) & (centered < 0.4), axis=-1)
        cfg = self.config
        return cfg.r0 + cfg.r1 * outer + cfg.r2 * ring

    @cached_property
    def all_rewards(self) -> np.ndarray:
        """全状態の報酬（辞書式順）"""
        return self.rewards_array(self.all_coords())

    # === モード集合 ===

    def mode_set(self) -> FrozenSet[GridState]:
        """R2 指示関数が 1 となる状態の集合"""
        per_dim = mode_coordinates(self.side)
        if not per_dim:
            raise EmptyModeSetError(f"モード集合が空です (D={self.dim}, H={self.side})")
        return frozenset(GridState(c) for c in itertools.product(per_dim, repeat=self.dim))

    def threshold_mode_set(self, threshold: float) -> FrozenSet[GridState]:
        """報酬が閾値以上の状態の集合"""
        coords = self.all_coords()
        selected = coords[self.all_rewards >= threshold]
        if selected.shape[0] == 0:
            raise EmptyModeSetError(f"報酬 {threshold} 以上の状態がありません")
        return frozenset(GridState(tuple(int(v) for v in c)) for c in selected)
