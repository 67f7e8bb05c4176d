"""
方策モデル
状態エンコード・共有トランク・P_F / P_B ヘッド・log Z・状態フローヘッド
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from DoubleGFN.autodiff import GradientTape, Tensor, masked_log_softmax_array
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import GridState, Action, Trajectory

logger = logging.getLogger(__name__)


@dataclass
class PolicySet:
    """学習可能な全パラメータ"""
    dim: int
    side: int
    hidden_dim: int
    num_layers: int
    leaky_slope: float
    with_log_flow: bool = False
    uniform_pb: bool = False
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, env: Hypergrid, rng: np.random.Generator, hidden_dim: int, num_layers: int,
                   leaky_slope: float, with_log_flow: bool = False, uniform_pb: bool = False) -> 'PolicySet':
        """一様分布 ±1/sqrt(fan_in) による初期化（log Z は 0）"""
        policy = cls(env.dim, env.side, hidden_dim, num_layers, leaky_slope, with_log_flow, uniform_pb)
        for name, (fan_in, fan_out) in policy.layer_shapes().items():
            bound = 1.0 / np.sqrt(fan_in)
            policy.params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            policy.params[f"{name}.bias"] = rng.uniform(-bound, bound, size=(fan_out,))
        policy.params['logZ'] = np.zeros(1)
        return policy

    def layer_shapes(self) -> Dict[str, Tuple[int, int]]:
        """線形層ごとの (入力, 出力) 次元"""
        shapes = {}
        width = self.dim * self.side
        for layer in range(self.num_layers):
            shapes[f"trunk.{layer}"] = (width, self.hidden_dim)
            width = self.hidden_dim
        shapes['pf'] = (width, self.dim + 1)
        if not self.uniform_pb:
            shapes['pb'] = (width, self.dim)
        if self.with_log_flow:
            shapes['logF'] = (width, 1)
        return shapes

    @property
    def log_z(self) -> float:
        return float(self.params['logZ'][0])

    def copy(self) -> 'PolicySet':
        """パラメータを複製したスナップショット"""
        return PolicySet(self.dim, self.side, self.hidden_dim, self.num_layers, self.leaky_slope,
                         self.with_log_flow, self.uniform_pb,
                         {name: value.copy() for name, value in self.params.items()})

    def equals(self, other: 'PolicySet') -> bool:
        """ビット単位の一致判定"""
        if self.params.keys() != other.params.keys():
            return False
        return all(
            self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )

    # === 順伝播（テープなし） ===

    def _trunk(self, encodings: np.ndarray) -> np.ndarray:
        h = encodings
        for layer in range(self.num_layers):
            h = h @ self.params[f"trunk.{layer}.weight"] + self.params[f"trunk.{layer}.bias"]
            h = np.where(h > 0, h, self.leaky_slope * h)
        return h

    def pf_logits(self, encodings: np.ndarray) -> np.ndarray:
        """P_F ヘッドのロジット [N, D+1]"""
        h = self._trunk(encodings)
        return h @ self.params['pf.weight'] + self.params['pf.bias']

    def pb_logits(self, encodings: np.ndarray) -> np.ndarray:
        """P_B ヘッドのロジット [N, D]（一様 P_B なら 0）"""
        if self.uniform_pb:
            return np.zeros((encodings.shape[0], self.dim))
        h = self._trunk(encodings)
        return h @ self.params['pb.weight'] + self.params['pb.bias']


# === 状態エンコード ===

def encode_coords(coords: np.ndarray, side: int) -> np.ndarray:
    """座標ごとの one-hot 連結 [N, D·H]"""
    coords = np.asarray(coords, dtype=np.int64)
    n, dim = coords.shape
    encodings = np.zeros((n, dim * side))
    encodings[np.arange(n)[:, None], np.arange(dim) * side + coords] = 1.0
    return encodings


def encode_state(state: GridState, env: Hypergrid) -> np.ndarray:
    """状態の one-hot エンコード（位置 d·H + coords[d] が 1）"""
    return encode_coords(np.asarray([state.coords]), env.side)[0]


# === 方策分布 ===

def forward_log_probs(policy: PolicySet, coords: np.ndarray, env: Hypergrid) -> np.ndarray:
    """マスク付き log P_F [N, D+1]"""
    logits = policy.pf_logits(encode_coords(coords, env.side))
    return masked_log_softmax_array(logits, env.valid_actions_array(coords))


def pf_distribution(policy: PolicySet, state: GridState, env: Hypergrid) -> np.ndarray:
    """前向き方策の確率ベクトル（非合法手は厳密に 0）"""
    env.check_bounds(state)
    return np.exp(forward_log_probs(policy, np.asarray([state.coords]), env)[0])


def pb_distribution(policy: PolicySet, state: GridState, env: Hypergrid) -> np.ndarray:
    """後ろ向き方策の確率ベクトル（親が存在しない次元は 0）"""
    env.check_bounds(state)
    if state == env.initial_state():
        raise ValueError("原点では P_B は定義されません")
    coords = np.asarray([state.coords])
    logits = policy.pb_logits(encode_coords(coords, env.side))
    return np.exp(masked_log_softmax_array(logits, env.parents_mask_array(coords))[0])


# === 軌跡サンプリング ===

def sample_batch(policy: PolicySet, env: Hypergrid, rng: np.random.Generator, batch_size: int,
                 exploration_epsilon: float = 0.0) -> List[Trajectory]:
    """
    軌跡をまとめてサンプリング

    軌跡 i は一様乱数行列の i 行目だけを消費するため、
    結果はバッチ内の処理順や並列度に依存しない。
    """
    max_len = env.max_trajectory_length
    uniforms = rng.random((batch_size, max_len))

    coords = np.zeros((batch_size, env.dim), dtype=np.int64)
    active = np.ones(batch_size, dtype=bool)
    states: List[List[GridState]] = [[env.initial_state()] for _ in range(batch_size)]
    actions: List[List[Action]] = [[] for _ in range(batch_size)]
    log_pfs: List[List[float]] = [[] for _ in range(batch_size)]

    for t in range(max_len):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        log_probs = forward_log_probs(policy, coords[rows], env)
        probs = np.exp(log_probs)
        if exploration_epsilon > 0.0:
            legal = env.valid_actions_array(coords[rows])
            uniform = legal / legal.sum(axis=1, keepdims=True)
            probs = (1.0 - exploration_epsilon) * probs + exploration_epsilon * uniform

        cumulative = np.cumsum(probs, axis=1)
        choice = (cumulative <= uniforms[rows, t][:, None]).sum(axis=1)
        # 丸め誤差で末尾を超えた場合は確率正の最後の手
        last_positive = env.num_actions - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
        choice = np.minimum(choice, last_positive)

        for k, row in enumerate(rows):
            a = int(choice[k])
            log_pfs[row].append(float(log_probs[k, a]))
            actions[row].append(Action.from_index(a, env.dim))
            if a == env.dim:
                active[row] = False
            else:
                coords[row, a] += 1
                states[row].append(GridState(tuple(int(c) for c in coords[row])))

    if active.any():
        raise AssertionError(f"軌跡長が上限 {max_len} を超えました")

    rewards = env.rewards_array(coords)
    return [
        Trajectory(tuple(states[i]), tuple(actions[i]), float(rewards[i]), log_pf=tuple(log_pfs[i]))
        for i in range(batch_size)
    ]


def sample_trajectory(policy: PolicySet, env: Hypergrid, rng: np.random.Generator,
                      exploration_epsilon: float = 0.0) -> Trajectory:
    """軌跡を1本サンプリング"""
    return sample_batch(policy, env, rng, 1, exploration_epsilon)[0]


# === テープ上の対数確率 ===

@dataclass
class TrajectoryBatch:
    """軌跡バッチの平坦化インデックス（行 = 各軌跡の状態 s_0..s_n）"""
    coords: np.ndarray
    traj_ids: np.ndarray
    actions: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    log_rewards: np.ndarray
    pb_rows: np.ndarray
    pb_targets: np.ndarray

    @property
    def num_rows(self) -> int:
        return self.coords.shape[0]

    @property
    def size(self) -> int:
        return self.offsets.shape[0]

    @classmethod
    def from_trajectories(cls, trajectories: List[Trajectory], env: Hypergrid) -> 'TrajectoryBatch':
        """軌跡リストから作成"""
        if not trajectories:
            raise ValueError("空のバッチです")
        coords, traj_ids, actions, lengths = [], [], [], []
        for b, traj in enumerate(trajectories):
            if len(traj.states) != len(traj.actions) or not traj.actions[-1].is_terminate:
                raise ValueError(f"軌跡 {b} の構造が不正です")
            for state, action in zip(traj.states, traj.actions):
                coords.append(state.coords)
                traj_ids.append(b)
                actions.append(action.index(env.dim))
            lengths.append(len(traj.states))

        lengths = np.asarray(lengths, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        # 非終了行 t の遷移 s_t -> s_{t+1} に対し、P_B は行 t+1 の列 a_t
        pb_rows = np.flatnonzero(actions != env.dim)
        return cls(
            coords=np.asarray(coords, dtype=np.int64),
            traj_ids=np.asarray(traj_ids, dtype=np.int64),
            actions=actions,
            offsets=offsets,
            lengths=lengths,
            log_rewards=np.log(np.asarray([t.reward for t in trajectories], dtype=np.float64)),
            pb_rows=pb_rows,
            pb_targets=pb_rows + 1,
        )


@dataclass
class BatchLogProbs:
    """行ごと・軌跡ごとの対数確率（テープ上）"""
    row_log_pf: Tensor
    row_log_pb: Tensor
    sum_log_pf: Tensor
    sum_log_pb: Tensor
    row_log_flow: Optional[Tensor] = None


def forward_heads(tape: GradientTape, leaves: Dict[str, Tensor], policy: PolicySet,
                  encodings: np.ndarray) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    """テープ上の順伝播（P_F ロジット, P_B ロジット, log F）"""
    h = tape.constant(encodings)
    for layer in range(policy.num_layers):
        h = tape.affine(h, leaves[f"trunk.{layer}.weight"], leaves[f"trunk.{layer}.bias"])
        h = tape.leaky_relu(h, policy.leaky_slope)
    pf = tape.affine(h, leaves['pf.weight'], leaves['pf.bias'])
    pb = None if policy.uniform_pb else tape.affine(h, leaves['pb.weight'], leaves['pb.bias'])
    log_flow = tape.affine(h, leaves['logF.weight'], leaves['logF.bias']) if policy.with_log_flow else None
    return pf, pb, log_flow


def batch_log_probs(tape: GradientTape, leaves: Dict[str, Tensor], policy: PolicySet,
                    env: Hypergrid, batch: TrajectoryBatch) -> BatchLogProbs:
    """バッチ全体の log P_F / log P_B をテープ上で再計算"""
    pf_logits, pb_logits, log_flow = forward_heads(tape, leaves, policy, encode_coords(batch.coords, env.side))
    rows = np.arange(batch.num_rows)

    pf_log_probs = tape.masked_log_softmax(pf_logits, env.valid_actions_array(batch.coords))
    row_log_pf = tape.gather(pf_log_probs, rows, batch.actions)

    # 終了行の P_B 項は 0（行インデックスへ散布）
    if policy.uniform_pb:
        num_parents = env.parents_mask_array(batch.coords[batch.pb_targets]).sum(axis=1)
        pb_values = np.zeros(batch.num_rows)
        pb_values[batch.pb_rows] = -np.log(num_parents)
        row_log_pb = tape.constant(pb_values)
    else:
        pb_log_probs = tape.masked_log_softmax(pb_logits, env.parents_mask_array(batch.coords))
        picked = tape.gather(pb_log_probs, batch.pb_targets, batch.actions[batch.pb_rows])
        row_log_pb = tape.segment_sum(picked, batch.pb_rows, batch.num_rows)

    return BatchLogProbs(
        row_log_pf=row_log_pf,
        row_log_pb=row_log_pb,
        sum_log_pf=tape.segment_sum(row_log_pf, batch.traj_ids, batch.size),
        sum_log_pb=tape.segment_sum(row_log_pb, batch.traj_ids, batch.size),
        row_log_flow=tape.gather(log_flow, rows, np.zeros(batch.num_rows, dtype=np.int64)) if log_flow is not None else None,
    )


def log_pf_pb(tape: GradientTape, leaves: Dict[str, Tensor], policy: PolicySet, env: Hypergrid,
              trajectory: Trajectory) -> Tuple[Tensor, Tensor]:
    """1本の軌跡の (Σ log P_F, Σ log P_B)（終了ステップは P_B に含めない）"""
    result = batch_log_probs(tape, leaves, policy, env, TrajectoryBatch.from_trajectories([trajectory], env))
    return result.sum_log_pf, result.sum_log_pb


# === ターゲットネットワーク ===

def polyak(target: PolicySet, online: PolicySet, alpha: float) -> PolicySet:
    """θ′ ← αθ + (1−α)θ′（log Z を含む全パラメータ）"""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha は (0, 1] の範囲で指定してください: {alpha}")
    if target.params.keys() != online.params.keys():
        raise ValueError("パラメータ構成が一致しません")
    for name in online.params:
        if target.params[name].shape != online.params[name].shape:
            raise ValueError(f"形状が一致しません: {name}")

    updated = target.copy()
    if alpha == 1.0:
        updated.params = {name: value.copy() for name, value in online.params.items()}
        return updated
    updated.params = {
        name: alpha * online.params[name] + (1.0 - alpha) * target.params[name]
        for name in online.params
    }
    return updated
