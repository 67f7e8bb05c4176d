"""
評価指標
経験分布の L1 誤差・モード発見・Top-K 報酬・多様性フィルタ付き Top-K
"""

import logging
from typing import Callable, Dict, FrozenSet, Hashable, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from DoubleGFN.constants import MAX_ENUMERABLE_STATES
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import GridState, MetricRecord, TopKResult, Trajectory, DistributionTable

logger = logging.getLogger(__name__)


class SampleWindow:
    """直近 K 個の終端状態（平坦インデックス）のリングバッファと状態ごとの出現数"""

    def __init__(self, capacity: int, num_states: int):
        if capacity < 1:
            raise ValueError(f"ウィンドウサイズは1以上が必要です: {capacity}")
        self.capacity = capacity
        self.num_states = num_states
        self._buffer = np.zeros(capacity, dtype=np.int64)
        self._cursor = 0
        self._size = 0
        self.counts = np.zeros(num_states, dtype=np.int64)

    def __len__(self) -> int:
        return self._size

    def extend(self, indices: Sequence[int]):
        """終端状態の追加（溢れた分は古い順に捨てる）"""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size == 0:
            return
        if indices.size >= self.capacity:
            recent = indices[-self.capacity:]
            self._buffer[:] = recent
            self.counts = np.bincount(recent, minlength=self.num_states).astype(np.int64)
            self._cursor = 0
            self._size = self.capacity
            return

        slots = (self._cursor + np.arange(indices.size)) % self.capacity
        if self._size == self.capacity:
            occupied = np.ones(indices.size, dtype=bool)
        else:
            occupied = slots < self._size
        np.subtract.at(self.counts, self._buffer[slots[occupied]], 1)
        np.add.at(self.counts, indices, 1)

        self._buffer[slots] = indices
        self._cursor = int((self._cursor + indices.size) % self.capacity)
        self._size = min(self.capacity, self._size + indices.size)

    def ordered(self) -> np.ndarray:
        """古い順の内容"""
        if self._size < self.capacity:
            return self._buffer[:self._size].copy()
        return np.roll(self._buffer, -self._cursor)

    def empirical(self) -> np.ndarray:
        """経験分布 p̂（全状態）"""
        if self._size == 0:
            raise ValueError("サンプルウィンドウが空です")
        return self.counts / float(self._size)

    @classmethod
    def restore(cls, capacity: int, num_states: int, contents: Sequence[int]) -> 'SampleWindow':
        """古い順の内容から復元"""
        window = cls(capacity, num_states)
        window.extend(contents)
        return window


def l1_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Σ_x |p(x) − q(x)|"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"分布のサイズが一致しません: {p.shape} != {q.shape}")
    return float(np.abs(p - q).sum())


def l1_error(window: SampleWindow, target_dist) -> float:
    """ウィンドウの経験分布と目標分布の L1 誤差（未出現状態は p*(x) を寄与）"""
    target = target_dist.probs if isinstance(target_dist, DistributionTable) else np.asarray(target_dist)
    return l1_distance(window.empirical(), target)


def update_modes(discovered: Set[GridState], batch_terminals: Iterable[GridState],
                 mode_set: FrozenSet[GridState]) -> Set[GridState]:
    """発見済みモード集合に今回のバッチでの到達モードを加える"""
    return set(discovered) | (set(batch_terminals) & mode_set)


def mode_fraction(discovered: Set[GridState], mode_set: FrozenSet[GridState]) -> float:
    """発見済みモードの割合"""
    return len(discovered) / len(mode_set)


def top_k_reward(rewards: Sequence[float], k: int) -> float:
    """報酬上位 k 個の平均（重複は出現ごとに数える）"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if k < 1 or k > rewards.size:
        raise ValueError(f"k={k} がサンプル数 {rewards.size} に対して不正です")
    return float(np.sort(rewards)[::-1][:k].mean())


def hamming_similarity(a: GridState, b: GridState) -> float:
    """座標の一致割合"""
    if a.dim != b.dim:
        raise ValueError("次元が一致しません")
    return sum(x == y for x, y in zip(a.coords, b.coords)) / a.dim


def diverse_top_k(samples: Sequence[Tuple[Hashable, float]], k: int,
                  similarity: Callable[[Hashable, Hashable], float], threshold: float) -> TopKResult:
    """
    多様性フィルタ付き Top-K 報酬

    報酬の降順（同点は状態の辞書式順）に走査し、採用済みの全サンプルとの
    類似度が threshold 以下のものだけを採用する。k 個に達したら終了。

    Args:
        samples: (状態, 報酬) の列
        k: 採用数
        similarity: 対称で [0, 1] に値をとる類似度関数
        threshold: 類似度の上限
    Returns:
        TopKResult: 採用数が k 未満なら shortfall=True
    """
    if k < 1:
        raise ValueError(f"k は1以上が必要です: {k}")
    ordered = sorted(samples, key=lambda item: (-item[1], item[0]))

    accepted: List[Tuple[Hashable, float]] = []
    for item, reward in ordered:
        if all(similarity(item, other) <= threshold for other, _ in accepted):
            accepted.append((item, reward))
            if len(accepted) == k:
                break

    if not accepted:
        return TopKResult(value=float('nan'), accepted=0, shortfall=True)
    value = float(np.mean([reward for _, reward in accepted]))
    return TopKResult(value=value, accepted=len(accepted), shortfall=len(accepted) < k)


class MetricTracker:
    """学習ループ内の指標集計（単一書き込み）"""

    def __init__(self, env: Hypergrid, mode_set: FrozenSet[GridState], window_size: int,
                 target: Optional[DistributionTable] = None):
        self.env = env
        self.mode_set = mode_set
        self.target = target
        self.window = SampleWindow(window_size, env.num_states if env.num_states <= MAX_ENUMERABLE_STATES else 0)
        self.discovered: Set[GridState] = set()
        self.last_mean_reward = float('nan')

    def observe(self, trajectories: List[Trajectory]):
        """サンプル済みバッチの反映"""
        terminals = [traj.terminal for traj in trajectories]
        if self.window.num_states:
            self.window.extend(self.env.index_of(np.asarray([s.coords for s in terminals])))
        self.discovered = update_modes(self.discovered, terminals, self.mode_set)
        self.last_mean_reward = float(np.mean([traj.reward for traj in trajectories]))

    @property
    def modes_found(self) -> int:
        return len(self.discovered)

    def record(self, step: int, trajectories_seen: int, loss: float, log_z: float,
               oracle_l1: Optional[float] = None) -> MetricRecord:
        """現時点の MetricRecord"""
        l1 = l1_error(self.window, self.target) if self.target is not None and len(self.window) else float('nan')
        return MetricRecord(
            step=step,
            trajectories=trajectories_seen,
            loss=loss,
            l1=l1,
            modes=self.modes_found,
            modes_frac=mode_fraction(self.discovered, self.mode_set),
            mean_reward=self.last_mean_reward,
            logZ=log_z,
            oracle_l1=oracle_l1,
        )

    def window_samples(self) -> List[Tuple[GridState, float]]:
        """ウィンドウ内の (状態, 報酬)（出現ごと）"""
        indices = self.window.ordered()
        coords = self.env.coords_of(indices)
        rewards = self.env.rewards_array(coords)
        return [(GridState(tuple(int(v) for v in c)), float(r)) for c, r in zip(coords, rewards)]

    def top_k_summary(self, k: int, diverse_threshold: float) -> Dict[str, object]:
        """ウィンドウ上の Top-K と多様性 Top-K"""
        samples = self.window_samples()
        if not samples:
            return {}
        effective_k = min(k, len(samples))
        # 同一状態の類似度は 1 なので、閾値 < 1 では重複は必ず棄却される
        candidates = samples
        if diverse_threshold < 1.0:
            candidates = list({state: reward for state, reward in samples}.items())
        diverse = diverse_top_k(candidates, k, hamming_similarity, diverse_threshold)
        return {
            'top_k': k,
            'top_k_reward': top_k_reward([r for _, r in samples], effective_k),
            'top_k_shortfall': effective_k < k,
            'diverse_top_k_reward': diverse.value,
            'diverse_top_k_accepted': diverse.accepted,
            'diverse_top_k_shortfall': diverse.shortfall,
            'diverse_threshold': diverse_threshold,
        }

    def state_dict(self) -> Dict[str, object]:
        """チェックポイント用の状態"""
        return {
            'discovered': sorted([list(s.coords) for s in self.discovered]),
            'window': self.window.ordered(),
            'last_mean_reward': self.last_mean_reward,
        }

    def load_state_dict(self, state: Dict[str, object]):
        """チェックポイントからの復元"""
        self.discovered = {GridState(tuple(c)) for c in state['discovered']}
        self.window = SampleWindow.restore(self.window.capacity, self.window.num_states,
                                             np.asarray(state['window'], dtype=np.int64))
        self.last_mean_reward = float(state['last_mean_reward'])
