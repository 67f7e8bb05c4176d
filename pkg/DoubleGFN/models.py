"""
データモデル定義
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Dict, List, Any

import numpy as np


@dataclass(frozen=True, order=True)
class GridState:
    """ハイパーグリッド上の状態（座標ベクトル）"""
    coords: Tuple[int, ...]

    @classmethod
    def of(cls, *coords: int) -> 'GridState':
        """座標から作成"""
        return cls(tuple(int(c) for c in coords))

    @property
    def dim(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class Action:
    """アクション（座標の +1 または終了）"""
    dim: Optional[int] = None

    @classmethod
    def increment(cls, d: int) -> 'Action':
        return cls(int(d))

    @classmethod
    def terminate(cls) -> 'Action':
        return cls(None)

    @property
    def is_terminate(self) -> bool:
        return self.dim is None

    def index(self, num_dims: int) -> int:
        """ロジット上の列番号（終了は num_dims）"""
        return num_dims if self.dim is None else self.dim

    @classmethod
    def from_index(cls, index: int, num_dims: int) -> 'Action':
        return cls.terminate() if index == num_dims else cls.increment(index)


@dataclass(frozen=True)
class TerminalState:
    """終了アクション後の終端オブジェクト x"""
    state: GridState


@dataclass
class Trajectory:
    """原点から終端までの完全な軌跡"""
    states: Tuple[GridState, ...]
    actions: Tuple[Action, ...]
    reward: float
    log_pf: Optional[Tuple[float, ...]] = None

    @property
    def terminal(self) -> GridState:
        return self.states[-1]

    @property
    def log_reward(self) -> float:
        return math.log(self.reward)


@dataclass
class LossReport:
    """損失の集計結果"""
    loss: float
    residuals: np.ndarray
    log_z: float


@dataclass
class MetricRecord:
    """チェックポイントごとの計測値"""
    step: int
    trajectories: int
    loss: float
    l1: float
    modes: int
    modes_frac: float
    mean_reward: float
    logZ: float
    oracle_l1: Optional[float] = None

    def to_row(self) -> dict:
        """CSV行に変換（固定ヘッダー順）"""
        return {
            'step': self.step,
            'trajectories': self.trajectories,
            'loss': repr(float(self.loss)),
            'l1': repr(float(self.l1)),
            'modes': self.modes,
            'modes_frac': repr(float(self.modes_frac)),
            'mean_reward': repr(float(self.mean_reward)),
            'logZ': repr(float(self.logZ)),
        }

    def to_dict(self) -> dict:
        """辞書型に変換"""
        return {
            'step': self.step,
            'trajectories': self.trajectories,
            'loss': self.loss,
            'l1': self.l1,
            'modes': self.modes,
            'modes_frac': self.modes_frac,
            'mean_reward': self.mean_reward,
            'logZ': self.logZ,
            'oracle_l1': self.oracle_l1,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricRecord':
        """辞書型から作成"""
        oracle_l1 = data.get('oracle_l1')
        return cls(
            step=int(data['step']),
            trajectories=int(data['trajectories']),
            loss=float(data['loss']),
            l1=float(data['l1']),
            modes=int(data['modes']),
            modes_frac=float(data['modes_frac']),
            mean_reward=float(data['mean_reward']),
            logZ=float(data['logZ']),
            oracle_l1=float(oracle_l1) if oracle_l1 not in (None, '') else None,
        )


@dataclass
class DistributionTable:
    """グリッド全状態上の確率分布（行優先の辞書式順）"""
    dim: int
    side: int
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.shape != (self.side ** self.dim,):
            raise ValueError(f"確率表のサイズが不正です: {self.probs.shape}")

    def prob(self, state: GridState) -> float:
        """状態の確率"""
        index = int(np.ravel_multi_index(state.coords, (self.side,) * self.dim))
        return float(self.probs[index])

    def to_rows(self) -> List[Dict[str, Any]]:
        """CSV行に変換（座標列 + probability）"""
        coords = np.indices((self.side,) * self.dim).reshape(self.dim, -1).T
        rows = []
        for c, p in zip(coords, self.probs):
            row = {f"x{d}": int(c[d]) for d in range(self.dim)}
            row['probability'] = repr(float(p))
            rows.append(row)
        return rows


@dataclass
class FlowAssignment:
    """状態フローと辺フロー（終端辺は子を None とする）"""
    state_flows: Dict[GridState, float] = field(default_factory=dict)
    edge_flows: Dict[Tuple[GridState, Optional[GridState]], float] = field(default_factory=dict)


@dataclass
class TopKResult:
    """Top-K 系指標の結果"""
    value: float
    accepted: int
    shortfall: bool = False


@dataclass
class TrajectoryEnumeration:
    """全軌跡の列挙結果"""
    trajectories: List[Trajectory]
    probabilities: np.ndarray
    terminal: DistributionTable

    @property
    def total_probability(self) -> float:
        return float(self.probabilities.sum())
