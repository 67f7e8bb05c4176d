"""
厳密計算オラクル
目標分布 R/Z・方策が誘導する終端分布（格子 DAG 上の動的計画法）・
小規模インスタンスの全軌跡列挙・フロー保存則の検査
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from DoubleGFN.autodiff import AdamState, GradientTape, adam_step
from DoubleGFN.constants import MAX_ENUMERATION_DIM, MAX_ENUMERATION_SIDE, DEFAULT_LR_LOGZ
from DoubleGFN.environment import Hypergrid
from DoubleGFN.models import (
    Action, DistributionTable, FlowAssignment, GridState, Trajectory, TrajectoryEnumeration,
)
from DoubleGFN.objectives import tb_loss
from DoubleGFN.policy import PolicySet, forward_log_probs
from DoubleGFN.utils import OracleSizeError

logger = logging.getLogger(__name__)


def target_distribution(env: Hypergrid) -> DistributionTable:
    """p*(x) = R(x) / Z"""
    rewards = env.all_rewards
    return DistributionTable(env.dim, env.side, rewards / rewards.sum())


def _levels(env: Hypergrid, coords: np.ndarray) -> List[np.ndarray]:
    """座標和ごとの状態インデックス（DAG のトポロジカル順）"""
    level_of = coords.sum(axis=1)
    return [np.flatnonzero(level_of == level) for level in range(env.dim * (env.side - 1) + 1)]


def sampler_distribution(policy: PolicySet, env: Hypergrid) -> DistributionTable:
    """
    前向き方策が誘導する終端分布

    reach(原点) = 1、reach(s′) = Σ reach(s)·P_F(s′|s) を座標和の昇順に計算し、
    p(x) = reach(x)·P_F(終了|x) とする。
    """
    coords = env.all_coords()
    probs = np.exp(forward_log_probs(policy, coords, env))

    reach = np.zeros(env.num_states)
    reach[0] = 1.0
    for level_states in _levels(env, coords):
        for d in range(env.dim):
            movable = level_states[coords[level_states, d] < env.side - 1]
            if movable.size == 0:
                continue
            np.add.at(reach, movable + env.strides[d], reach[movable] * probs[movable, d])

    return DistributionTable(env.dim, env.side, reach * probs[:, env.dim])


def oracle_l1(policy: PolicySet, env: Hypergrid, target: Optional[DistributionTable] = None) -> float:
    """厳密な終端分布と目標分布の L1 距離"""
    target = target if target is not None else target_distribution(env)
    return float(np.abs(sampler_distribution(policy, env).probs - target.probs).sum())


def _check_enumerable(env: Hypergrid):
    if env.dim > MAX_ENUMERATION_DIM or env.side > MAX_ENUMERATION_SIDE:
        raise OracleSizeError(
            f"全軌跡列挙は D≤{MAX_ENUMERATION_DIM}, H≤{MAX_ENUMERATION_SIDE} のみ対応です "
            f"(D={env.dim}, H={env.side})"
        )


def all_trajectories(env: Hypergrid) -> List[Trajectory]:
    """全完全軌跡（深さ優先、アクション番号の昇順）"""
    _check_enumerable(env)
    trajectories: List[Trajectory] = []

    def visit(states: Tuple[GridState, ...], actions: Tuple[Action, ...]):
        state = states[-1]
        legal = env.valid_actions(state)
        for index in range(env.num_actions):
            if not legal[index]:
                continue
            action = Action.from_index(index, env.dim)
            if action.is_terminate:
                trajectories.append(Trajectory(states, actions + (action,), env.reward(state)))
            else:
                visit(states + (env.step(state, action),), actions + (action,))

    visit((env.initial_state(),), ())
    return trajectories


def enumerate_trajectories(policy: PolicySet, env: Hypergrid) -> TrajectoryEnumeration:
    """全軌跡の確率と終端ごとの和"""
    trajectories = all_trajectories(env)
    coords = env.all_coords()
    log_probs = forward_log_probs(policy, coords, env)

    probabilities = np.zeros(len(trajectories))
    terminal = np.zeros(env.num_states)
    for i, traj in enumerate(trajectories):
        rows = env.index_of(np.asarray([s.coords for s in traj.states]))
        cols = np.asarray([a.index(env.dim) for a in traj.actions])
        log_pf = log_probs[rows, cols]
        traj.log_pf = tuple(float(v) for v in log_pf)
        probabilities[i] = np.exp(log_pf.sum())
        terminal[rows[-1]] += probabilities[i]

    return TrajectoryEnumeration(trajectories, probabilities, DistributionTable(env.dim, env.side, terminal))


def check_flow_balance(flows: FlowAssignment, env: Hypergrid, rewards: Optional[np.ndarray] = None) -> float:
    """
    フロー保存則の最大違反量

    内部状態では |流入 − 流出|（原点の流入は状態フロー F(s0)）、
    終端辺では |F(s→s_f) − R(s)| の最大値を返す。
    """
    rewards = env.all_rewards if rewards is None else np.asarray(rewards)
    origin = env.initial_state()
    inflow: Dict[GridState, float] = {}
    outflow: Dict[GridState, float] = {}
    for (parent, child), value in flows.edge_flows.items():
        outflow[parent] = outflow.get(parent, 0.0) + value
        if child is not None:
            inflow[child] = inflow.get(child, 0.0) + value

    worst = 0.0
    for c in env.all_coords():
        state = GridState(tuple(int(v) for v in c))
        incoming = flows.state_flows.get(origin, 0.0) if state == origin else inflow.get(state, 0.0)
        outgoing = outflow.get(state, 0.0)
        worst = max(worst, abs(incoming - outgoing))
        if state in flows.state_flows:
            worst = max(worst, abs(flows.state_flows[state] - outgoing))
        terminal_flow = flows.edge_flows.get((state, None), 0.0)
        worst = max(worst, abs(terminal_flow - float(rewards[env.index_of(c)])))
    return worst


def balanced_flows(env: Hypergrid) -> FlowAssignment:
    """一様な後ろ向き分配で構成した保存則を満たすフロー"""
    coords = env.all_coords()
    rewards = env.all_rewards
    state_flow = rewards.copy()
    num_parents = env.parents_mask_array(coords).sum(axis=1)

    assignment = FlowAssignment()
    for level_states in reversed(_levels(env, coords)):
        for s in level_states:
            state = GridState(tuple(int(v) for v in coords[s]))
            assignment.state_flows[state] = float(state_flow[s])
            assignment.edge_flows[(state, None)] = float(rewards[s])
            if num_parents[s] == 0:
                continue
            share = state_flow[s] / num_parents[s]
            for d in np.flatnonzero(coords[s] > 0):
                parent_index = s - env.strides[d]
                state_flow[parent_index] += share
                assignment.edge_flows[(env.parent(state, int(d)), state)] = float(share)
    return assignment


def fit_trajectory_balance(policy: PolicySet, env: Hypergrid, max_steps: int = 8000, lr: float = 1e-2,
                           lr_logz: float = DEFAULT_LR_LOGZ, final_lr_scale: float = 1e-3,
                           tolerance: float = 1e-10) -> Tuple[PolicySet, float]:
    """
    全軌跡上の TB 損失を直接最小化する

    学習率は final_lr_scale まで指数的に減衰させる。
    Returns:
        (学習後の方策, 最終損失)
    """
    trajectories = all_trajectories(env)
    state = AdamState(lr=lr, lr_overrides={'logZ': lr_logz})
    loss_value = float('inf')
    for step in range(max_steps):
        tape = GradientTape()
        leaves = tape.watch_all(policy.params)
        loss, report = tb_loss(tape, leaves, policy, env, trajectories)
        loss_value = report.loss
        if loss_value < tolerance:
            break
        grads = tape.backward(loss)
        adam_step(policy, grads, state, lr_scale=final_lr_scale ** (step / max_steps))

    logger.info(f"TB 直接最適化が完了しました: 損失 {loss_value:.3e}（{step + 1} ステップ）")
    return policy, loss_value
