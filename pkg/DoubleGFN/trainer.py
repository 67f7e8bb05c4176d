"""
Double GFlowNet 学習ループ
オンラインネットワーク θ とターゲットネットワーク θ′ を保持し、
θ′ の前向き方策でサンプリングした軌跡で θ を更新する
"""

import logging
import shutil
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Any

import numpy as np

from DoubleGFN.autodiff import AdamState, GradientTape, adam_step
from DoubleGFN.checkpoint import CheckpointData, latest_checkpoint, load_checkpoint, save_checkpoint
from DoubleGFN.config import ExperimentConfig, TrainerConfig
from DoubleGFN.constants import METRIC_COLUMNS, MAX_ENUMERABLE_STATES
from DoubleGFN.environment import Hypergrid
from DoubleGFN.metrics import MetricTracker
from DoubleGFN.models import LossReport, MetricRecord, Trajectory
from DoubleGFN.objectives import compute_loss, tb_residuals
from DoubleGFN.oracle import oracle_l1, target_distribution
from DoubleGFN.policy import PolicySet, polyak, sample_batch
from DoubleGFN.utils import FileUtils, NonFiniteError, RunIOError, TrainingAbort

SMOOTHING_WINDOW = 100


def should_update_target(t: int, config: TrainerConfig) -> bool:
    """t < T^I または t mod T^U == 0 のとき θ′ を更新"""
    if t < 1:
        raise ValueError(f"ステップ番号は1以上です: {t}")
    return t < config.initial_phase or t % config.update_period == 0


@dataclass
class TargetState:
    """ターゲットネットワークと最終更新ステップ"""
    policy: PolicySet
    last_update: int = 0


def sampling_policy(online: PolicySet, target: Optional[TargetState]) -> PolicySet:
    """軌跡をサンプリングする方策（GFN ではオンラインと同一）"""
    return online if target is None else target.policy


def train_step(online: PolicySet, target: Optional[TargetState], config: TrainerConfig, env: Hypergrid,
               rng: np.random.Generator, adam: AdamState, step: int
               ) -> Tuple[PolicySet, Optional[TargetState], LossReport, List[Trajectory]]:
    """
    1ステップの学習

    1. θ′ の前向き方策で M 本の軌跡をサンプリング（重要度重みなし）
    2. θ についてのみ損失を微分し Adam で1回更新
    3. スケジュール該当ステップなら θ′ ← αθ + (1−α)θ′

    Args:
        target: DGFN のターゲット状態。GFN では None（θ′ は θ の別名）
    Returns:
        (θ, θ′, LossReport, サンプル軌跡)
    """
    trajectories = sample_batch(sampling_policy(online, target), env, rng, config.batch_size,
                                config.exploration_epsilon)

    tape = GradientTape()
    leaves = tape.watch_all(online.params)
    try:
        loss, report = compute_loss(tape, leaves, online, env, trajectories, config.objective,
                                    config.subtb_lambda)
    except NonFiniteError as e:
        raise TrainingAbort(step, str(e), tb_residuals(online, env, trajectories))
    if not np.isfinite(report.loss):
        raise TrainingAbort(step, f"損失が有限ではありません: {report.loss}", report.residuals)

    try:
        grads = tape.backward(loss)
        adam_step(online, grads, adam)
    except NonFiniteError as e:
        raise TrainingAbort(step, str(e), report.residuals)

    if target is not None and should_update_target(step, config):
        alpha = config.alpha
        if config.initial_phase_full_copy and step < config.initial_phase:
            alpha = 1.0
        target = TargetState(polyak(target.policy, online, alpha), step)

    return online, target, report, trajectories


class DGFNTrainer:
    """1シード分の学習実行"""

    def __init__(self, experiment: ExperimentConfig, seed: int, run_dir: Path,
                 progress_callback: Optional[Callable[[float, str, str], None]] = None):
        self.experiment = experiment
        self.config = experiment.trainer_for_seed(seed)
        self.seed = seed
        self.run_dir = Path(run_dir)
        self.config_hash = experiment.config_hash()
        self.env = Hypergrid(experiment.env)
        self.logger = logging.getLogger(self.__class__.__name__)
        self._progress_callback = progress_callback

        self.metrics_csv = self.run_dir / "metrics.csv"
        self.metrics_jsonl = self.run_dir / "metrics.jsonl"
        self.summary_path = self.run_dir / "summary.json"
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.abort_path = self.run_dir / "abort.json"

        self._initialize()

    def _initialize(self):
        """乱数・ネットワーク・最適化器・指標の初期化"""
        init_seq, sample_seq = np.random.SeedSequence(self.seed).spawn(2)
        self.rng = np.random.default_rng(sample_seq)
        cfg = self.config

        self.online = PolicySet.initialize(
            self.env, np.random.default_rng(init_seq), cfg.hidden_dim, cfg.num_layers, cfg.leaky_slope,
            with_log_flow=cfg.objective == 'subtb', uniform_pb=cfg.uniform_pb,
        )
        self.target = TargetState(self.online.copy(), 0) if cfg.uses_target else None
        self.adam = AdamState(
            lr=cfg.lr_policy, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
            lr_overrides={'logZ': cfg.lr_logz},
        )

        metric_cfg = self.experiment.metrics
        if metric_cfg.mode_criterion == 'threshold':
            mode_set = self.env.threshold_mode_set(metric_cfg.mode_threshold)
        else:
            mode_set = self.env.mode_set()
        target_dist = target_distribution(self.env) if self.env.num_states <= MAX_ENUMERABLE_STATES else None
        self.tracker = MetricTracker(self.env, mode_set, metric_cfg.window_size, target_dist)
        self.oracle_enabled = self.env.num_states <= metric_cfg.oracle_max_states

        self.step = 0
        self.recent_losses: deque = deque(maxlen=SMOOTHING_WINDOW)
        self.all_modes_step: Optional[int] = None
        self.last_record: Optional[MetricRecord] = None

    # === チェックポイント ===

    def _checkpoint_data(self) -> CheckpointData:
        return CheckpointData(
            step=self.step,
            config_hash=self.config_hash,
            online=self.online,
            target=self.target.policy if self.target is not None else None,
            target_last_update=self.target.last_update if self.target is not None else 0,
            adam=self.adam,
            rng_state=self.rng.bit_generator.state,
            metrics_state=self.tracker.state_dict(),
            extra={
                'all_modes_step': self.all_modes_step,
                'last_record': self.last_record.to_dict() if self.last_record else None,
                'arrays': {'recent_losses': np.asarray(self.recent_losses, dtype=np.float64)},
            },
        )

    def _restore(self, manifest_path: Path):
        """チェックポイントからの状態復元"""
        data = load_checkpoint(manifest_path, expected_hash=self.config_hash)
        self.step = data.step
        self.online = data.online
        if self.target is not None:
            self.target = TargetState(data.target, data.target_last_update)
        self.adam = data.adam
        self.rng.bit_generator.state = data.rng_state
        self.tracker.load_state_dict(data.metrics_state)
        self.all_modes_step = data.extra.get('all_modes_step')
        last = data.extra.get('last_record')
        self.last_record = MetricRecord.from_dict(last) if last else None
        self.recent_losses = deque(np.asarray(data.extra['arrays'].get('recent_losses', [])).tolist(),
                                   maxlen=SMOOTHING_WINDOW)

        FileUtils.truncate_after_step(self.metrics_csv, self.step)
        FileUtils.truncate_after_step(self.metrics_jsonl, self.step, jsonl=True)
        self.logger.info(f"ステップ {self.step} から再開します: {manifest_path}")

    # === 実行 ===

    def run(self, resume: bool = False) -> Dict[str, Any]:
        """
        total_steps まで学習し、最終サマリーを返す

        Args:
            resume: 最新チェックポイントから再開する
        """
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)

        manifest = latest_checkpoint(self.checkpoint_dir) if resume else None
        if manifest is not None:
            self._restore(manifest)
        else:
            self._clear_outputs()

        self.logger.info(f"学習を開始します: {cfg.label} seed={self.seed} ({self.step}/{cfg.total_steps})")
        for step in range(self.step + 1, cfg.total_steps + 1):
            try:
                self.online, self.target, report, trajectories = train_step(
                    self.online, self.target, cfg, self.env, self.rng, self.adam, step,
                )
            except TrainingAbort as e:
                self._dump_abort(e)
                raise
            self.step = step
            self.recent_losses.append(report.loss)
            self.tracker.observe(trajectories)
            if self.all_modes_step is None and self.tracker.modes_found == len(self.tracker.mode_set):
                self.all_modes_step = step

            try:
                if step % cfg.metric_every == 0 or step == cfg.total_steps:
                    self._emit_metrics(step, report)
                if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                    save_checkpoint(self.checkpoint_dir, self._checkpoint_data())
            except OSError as e:
                raise RunIOError(step, e)

        summary = self.summary()
        try:
            FileUtils.write_json(self.summary_path, summary)
        except OSError as e:
            raise RunIOError(self.step, e)
        self.logger.info(f"学習が完了しました: {cfg.label} seed={self.seed}")
        return summary

    def _clear_outputs(self):
        """新規実行前に以前の記録・チェックポイント・サマリーを削除"""
        for path in (self.metrics_csv, self.metrics_jsonl, self.summary_path, self.abort_path):
            if path.exists():
                path.unlink()
        if self.checkpoint_dir.exists():
            shutil.rmtree(self.checkpoint_dir)

    def _dump_abort(self, error: TrainingAbort):
        """中断時の残差ダンプ"""
        self.logger.error(str(error))
        dump = error.to_dict()
        dump.update({'config_hash': self.config_hash, 'seed': self.seed})
        FileUtils.write_json(self.abort_path, dump)
        self.logger.error(f"残差を出力しました: {self.abort_path}")

    def _emit_metrics(self, step: int, report: LossReport):
        """指標の記録（CSV・JSON-lines）"""
        oracle = oracle_l1(self.online, self.env, self.tracker.target) if self.oracle_enabled else None
        record = self.tracker.record(step, step * self.config.batch_size, report.loss, report.log_z, oracle)
        self.last_record = record

        FileUtils.append_csv_rows(self.metrics_csv, [record.to_row()], METRIC_COLUMNS)
        line = record.to_dict()
        line['config_hash'] = self.config_hash
        line['seed'] = self.seed
        FileUtils.append_jsonl(self.metrics_jsonl, [line])

        progress = 100.0 * step / self.config.total_steps
        detail = f"loss={record.loss:.4g} l1={record.l1:.4g} modes={record.modes}"
        self._report_progress(progress, f"{self.config.label} seed={self.seed} step {step}", detail)

    def summary(self) -> Dict[str, Any]:
        """最終サマリー"""
        metric_cfg = self.experiment.metrics
        summary: Dict[str, Any] = {
            'config_hash': self.config_hash,
            'label': self.config.label,
            'seed': self.seed,
            'steps': self.step,
            'trajectories': self.step * self.config.batch_size,
            'total_modes': len(self.tracker.mode_set),
            'all_modes_step': self.all_modes_step,
            'all_modes_trajectories': (self.all_modes_step * self.config.batch_size
                                       if self.all_modes_step is not None else None),
            'smoothed_loss': float(np.mean(self.recent_losses)) if self.recent_losses else None,
            'final': self.last_record.to_dict() if self.last_record else None,
        }
        summary.update(self.tracker.top_k_summary(metric_cfg.top_k, metric_cfg.diverse_threshold))
        return summary

    def _report_progress(self, progress: float, status: str, detail: str = ""):
        """進捗報告"""
        self.logger.info(f"{status} ({progress:.1f}%) {detail}")
        if self._progress_callback:
            self._progress_callback(progress, status, detail)
