"""
目的関数
軌跡バランス (TB) とサブ軌跡バランス (SubTB)
"""

import logging
from typing import List, Tuple

import numpy as np

from DoubleGFN.autodiff import GradientTape, Tensor, masked_log_softmax_array
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import Trajectory, LossReport
from DoubleGFN.policy import PolicySet, TrajectoryBatch, batch_log_probs, encode_coords

logger = logging.getLogger(__name__)


def _check_rewards(trajectories: List[Trajectory]):
    for i, traj in enumerate(trajectories):
        if not traj.reward > 0:
            raise ValueError(f"軌跡 {i} の報酬が正ではありません: {traj.reward}")


def tb_loss(tape: GradientTape, leaves, policy: PolicySet, env: Hypergrid,
            trajectories: List[Trajectory]) -> Tuple[Tensor, LossReport]:
    """
    軌跡バランス損失

    残差 = log Z + Σ log P_F − log R(x) − Σ log P_B（全てテープ上で再計算）
    損失 = 残差二乗の平均
    """
    _check_rewards(trajectories)
    batch = TrajectoryBatch.from_trajectories(trajectories, env)
    log_probs = batch_log_probs(tape, leaves, policy, env, batch)

    log_z = tape.take(leaves['logZ'], np.zeros(batch.size, dtype=np.int64))
    residuals = tape.sub(
        tape.sub(tape.add(log_z, log_probs.sum_log_pf), tape.constant(batch.log_rewards)),
        log_probs.sum_log_pb,
    )
    loss = tape.scale(tape.sum(tape.square(residuals)), 1.0 / batch.size)
    return loss, LossReport(loss.item(), residuals.data.copy(), float(leaves['logZ'].data[0]))


def tb_residuals(policy: PolicySet, env: Hypergrid, trajectories: List[Trajectory]) -> np.ndarray:
    """テープを使わない TB 残差（NaN/Inf もそのまま返す）"""
    batch = TrajectoryBatch.from_trajectories(trajectories, env)
    rows = np.arange(batch.num_rows)
    with np.errstate(all='ignore'):
        encodings = encode_coords(batch.coords, env.side)
        pf = masked_log_softmax_array(policy.pf_logits(encodings), env.valid_actions_array(batch.coords))
        row_log_pf = pf[rows, batch.actions]

        row_log_pb = np.zeros(batch.num_rows)
        if policy.uniform_pb:
            num_parents = env.parents_mask_array(batch.coords[batch.pb_targets]).sum(axis=1)
            row_log_pb[batch.pb_rows] = -np.log(num_parents)
        else:
            pb = masked_log_softmax_array(policy.pb_logits(encodings), env.parents_mask_array(batch.coords))
            row_log_pb[batch.pb_rows] = pb[batch.pb_targets, batch.actions[batch.pb_rows]]

        sum_log_pf = np.bincount(batch.traj_ids, weights=row_log_pf, minlength=batch.size)
        sum_log_pb = np.bincount(batch.traj_ids, weights=row_log_pb, minlength=batch.size)
        return policy.params['logZ'][0] + sum_log_pf - batch.log_rewards - sum_log_pb


def subtrajectory_pairs(batch: TrajectoryBatch, lam: float) -> Tuple[np.ndarray, ...]:
    """
    全サブ軌跡 (i, j) の列挙

    軌跡 b の節点は u_0 = s_0, …, u_n = s_n, u_{n+1} = 終端（計 n+2 個）。
    log F(u_0) は log Z、log F(u_{n+1}) は log R(x)、それ以外は状態フローヘッド。

    Returns:
        (始点節点, 終点節点, 始点累積和位置, 終点累積和位置, 重み)
        節点は連結ベクトル [log F 行 (N), log Z, log R (B)] 上の位置
    """
    n_rows = batch.num_rows
    start_nodes, end_nodes, start_cum, end_cum, weights = [], [], [], [], []
    for b in range(batch.size):
        offset = int(batch.offsets[b])
        num_nodes = int(batch.lengths[b]) + 1

        nodes = offset + np.arange(num_nodes, dtype=np.int64)
        nodes[0] = n_rows
        nodes[-1] = n_rows + 1 + b

        i_idx, j_idx = np.triu_indices(num_nodes, k=1)
        w = lam ** (j_idx - i_idx).astype(np.float64)
        weights.append(w / w.sum() / batch.size)
        start_nodes.append(nodes[i_idx])
        end_nodes.append(nodes[j_idx])
        start_cum.append(offset + i_idx)
        end_cum.append(offset + j_idx)

    return (np.concatenate(start_nodes), np.concatenate(end_nodes),
            np.concatenate(start_cum), np.concatenate(end_cum), np.concatenate(weights))


def subtb_loss(tape: GradientTape, leaves, policy: PolicySet, env: Hypergrid,
               trajectories: List[Trajectory], lam: float) -> Tuple[Tensor, LossReport]:
    """
    サブ軌跡バランス損失（λ^{j−i} 重み付き、軌跡ごとに正規化してバッチ平均）

    残差_{ij} = log F(u_i) + Σ_{i<t≤j} (log P_F − log P_B) − log F(u_j)
    """
    if not policy.with_log_flow:
        raise ValueError("SubTB には状態フローヘッド (logF) が必要です")
    if not (0.0 < lam <= 1.0):
        raise ValueError(f"λ は (0, 1] の範囲で指定してください: {lam}")
    _check_rewards(trajectories)

    batch = TrajectoryBatch.from_trajectories(trajectories, env)
    log_probs = batch_log_probs(tape, leaves, policy, env, batch)

    # 節点フロー: [状態フロー行 (N), log Z, log R (B)]
    node_flows = tape.concat([log_probs.row_log_flow, leaves['logZ'], tape.constant(batch.log_rewards)])

    # 遷移ごとの差分の累積和（先頭に 0）。軌跡をまたいだ差は打ち消し合う
    delta = tape.sub(log_probs.row_log_pf, log_probs.row_log_pb)
    cumulative = tape.concat([tape.constant(np.zeros(1)), tape.cumsum(delta)])

    start_nodes, end_nodes, start_cum, end_cum, weights = subtrajectory_pairs(batch, lam)
    residuals = tape.add(
        tape.sub(tape.take(node_flows, start_nodes), tape.take(node_flows, end_nodes)),
        tape.sub(tape.take(cumulative, end_cum), tape.take(cumulative, start_cum)),
    )
    loss = tape.sum(tape.scale(tape.square(residuals), weights))

    # 報告用には完全軌跡 (0, n+1) の残差
    full = residuals.data[_full_pair_positions(batch)]
    return loss, LossReport(loss.item(), full.copy(), float(leaves['logZ'].data[0]))


def _full_pair_positions(batch: TrajectoryBatch) -> np.ndarray:
    """各軌跡の (0, n+1) ペアの位置"""
    positions = []
    cursor = 0
    for length in batch.lengths:
        num_nodes = int(length) + 1
        # triu_indices の並びで (0, num_nodes-1) は num_nodes-2 番目
        positions.append(cursor + num_nodes - 2)
        cursor += num_nodes * (num_nodes - 1) // 2
    return np.asarray(positions, dtype=np.int64)


def compute_loss(tape: GradientTape, leaves, policy: PolicySet, env: Hypergrid,
                 trajectories: List[Trajectory], objective: str, lam: float) -> Tuple[Tensor, LossReport]:
    """目的関数の選択"""
    if objective == 'tb':
        return tb_loss(tape, leaves, policy, env, trajectories)
    if objective == 'subtb':
        return subtb_loss(tape, leaves, policy, env, trajectories, lam)
    raise ValueError(f"未知の目的関数です: {objective}")
