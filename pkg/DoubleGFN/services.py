"""
統合ビジネスロジック
学習・スイープ・オラクル出力・プロット用データ出力
"""

import json
import logging
from pathlib import Path
from typing import Dict, Any, Optional, List, Callable, Tuple

import numpy as np

from DoubleGFN.checkpoint import latest_checkpoint, load_checkpoint
from DoubleGFN.config import ExperimentConfig, SweepSpec, save_experiment_json
from DoubleGFN.constants import AGGREGATE_METRICS, PLOT_PANELS, ENCODING
from DoubleGFN.database import SweepDatabase
from DoubleGFN.environment import Hypergrid
from DoubleGFN.oracle import (
    balanced_flows, check_flow_balance, enumerate_trajectories, sampler_distribution, target_distribution,
)
from DoubleGFN.trainer import DGFNTrainer
from DoubleGFN.utils import (
    ConfigHashMismatchError, ErrorHandler, FileUtils, MissingColumnError, OracleSizeError, StatsUtils,
)

try:
    import openpyxl
    OPENPYXL_AVAILABLE = True
except ImportError:
    OPENPYXL_AVAILABLE = False

ProgressCallback = Callable[[float, str, str], None]

PANEL_FIELDS = ['series', 'step', 'trajectories', 'mean', 'stderr', 'num_runs', 'config_hash']


def _with_hash(rows: List[Dict[str, Any]], config_hash: str) -> List[Dict[str, Any]]:
    return [{**row, 'config_hash': config_hash} for row in rows]


def read_run_hash(run_dir: Path) -> str:
    """シード実行ディレクトリの設定ハッシュ"""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        return FileUtils.read_json(summary_path)['config_hash']
    jsonl_path = run_dir / "metrics.jsonl"
    if jsonl_path.exists():
        with open(jsonl_path, 'r', encoding=ENCODING) as f:
            first = f.readline().strip()
        if first:
            return json.loads(first)['config_hash']
    raise ValueError(f"設定ハッシュが見つかりません: {run_dir}")


def seed_run_dirs(experiment_dir: Path) -> List[Path]:
    """実験ディレクトリ内のシード実行（シード番号順）"""
    dirs = [p for p in Path(experiment_dir).glob('seed_*') if (p / "metrics.csv").exists()]
    return sorted(dirs, key=lambda p: int(p.name.split('_', 1)[1]))


def aggregate_runs(run_dirs: List[Path]) -> Tuple[str, List[Dict[str, Any]]]:
    """
    シード間の平均と標準誤差

    全シードに共通するステップのみを集計する。
    Returns:
        (設定ハッシュ, 集計行)
    Raises:
        ConfigHashMismatchError: 設定ハッシュが混在している
    """
    if not run_dirs:
        raise ValueError("集計対象の実行がありません")
    hashes = {read_run_hash(d) for d in run_dirs}
    if len(hashes) != 1:
        raise ConfigHashMismatchError(f"異なる設定ハッシュの実行は集計できません: {sorted(hashes)}")
    config_hash = hashes.pop()

    tables = [_read_metric_table(Path(d) / "metrics.csv", AGGREGATE_METRICS) for d in run_dirs]
    common_steps = sorted(set.intersection(*(set(t) for t in tables)))

    rows = []
    for step in common_steps:
        row: Dict[str, Any] = {'step': step, 'trajectories': tables[0][step]['trajectories']}
        for metric in AGGREGATE_METRICS:
            mean, stderr = StatsUtils.mean_and_stderr([float(t[step][metric]) for t in tables])
            row[f"{metric}_mean"] = repr(mean)
            row[f"{metric}_stderr"] = repr(stderr)
        row['num_seeds'] = len(tables)
        row['config_hash'] = config_hash
        rows.append(row)
    return config_hash, rows


def aggregate_fieldnames() -> List[str]:
    """aggregate.csv のヘッダー"""
    names = ['step', 'trajectories']
    for metric in AGGREGATE_METRICS:
        names.extend([f"{metric}_mean", f"{metric}_stderr"])
    return names + ['num_seeds', 'config_hash']


def _read_metric_table(csv_path: Path, required: List[str]) -> Dict[int, Dict[str, str]]:
    """メトリクス CSV をステップ -> 行 の辞書で読む（必須列を検査）"""
    header = FileUtils.read_csv_header(csv_path)
    for column in ['step', 'trajectories'] + list(required):
        if column not in header:
            raise MissingColumnError(f"列 '{column}' がありません: {csv_path}")
    return {int(row['step']): row for row in FileUtils.read_csv(csv_path)}


class TrainService:
    """学習実行サービス"""

    def __init__(self, output_root: Path, progress_callback: Optional[ProgressCallback] = None):
        self.output_root = Path(output_root)
        self.progress_callback = progress_callback
        self.logger = logging.getLogger(__name__)

    def experiment_dir(self, experiment: ExperimentConfig) -> Path:
        return self.output_root / experiment.name

    def run(self, experiment: ExperimentConfig, resume: bool = False) -> Path:
        """全シードの学習と集計"""
        experiment_dir = self.experiment_dir(experiment)
        experiment_dir.mkdir(parents=True, exist_ok=True)
        FileUtils.write_json(experiment_dir / "run.json", save_experiment_json(experiment))
        self.logger.info(f"実験を開始します: {experiment.name} (hash={experiment.config_hash()})")

        summaries = []
        for seed in experiment.seeds:
            trainer = DGFNTrainer(experiment, seed, experiment_dir / f"seed_{seed}", self.progress_callback)
            summaries.append(trainer.run(resume=resume))

        self.write_aggregate(experiment, experiment_dir, summaries)
        self.logger.info(f"実験が完了しました: {experiment_dir}")
        return experiment_dir

    def write_aggregate(self, experiment: ExperimentConfig, experiment_dir: Path,
                        summaries: List[Dict[str, Any]]) -> Dict[str, Any]:
        """aggregate.csv と summary.json の作成"""
        run_dirs = [experiment_dir / f"seed_{seed}" for seed in experiment.seeds]
        config_hash, rows = aggregate_runs(run_dirs)
        FileUtils.write_csv(experiment_dir / "aggregate.csv", rows, aggregate_fieldnames())

        summary = summarize_seeds(summaries)
        summary.update({
            'config_hash': config_hash,
            'label': experiment.trainer.label,
            'name': experiment.name,
            'seeds': list(experiment.seeds),
        })
        FileUtils.write_json(experiment_dir / "summary.json", summary)
        return summary


def summarize_seeds(summaries: List[Dict[str, Any]]) -> Dict[str, Any]:
    """シードごとのサマリーの平均・標準誤差"""
    result: Dict[str, Any] = {'num_seeds': len(summaries), 'final': {}}
    finals = [s['final'] for s in summaries if s.get('final')]
    for metric in AGGREGATE_METRICS + ['oracle_l1']:
        values = [f[metric] for f in finals if f.get(metric) is not None]
        if values:
            mean, stderr = StatsUtils.mean_and_stderr(values)
            result['final'][metric] = {'mean': mean, 'stderr': stderr}

    reached = [s['all_modes_trajectories'] for s in summaries if s.get('all_modes_trajectories') is not None]
    result['all_modes_seeds'] = len(reached)
    result['all_modes_trajectories_mean'] = float(np.mean(reached)) if reached else None

    for key in ('top_k_reward', 'diverse_top_k_reward'):
        values = [s[key] for s in summaries if s.get(key) is not None]
        if values:
            mean, stderr = StatsUtils.mean_and_stderr(values)
            result[key] = {'mean': mean, 'stderr': stderr}
    return result


class SweepService:
    """T^I × T^U グリッド探索サービス"""

    def __init__(self, output_root: Path, progress_callback: Optional[ProgressCallback] = None):
        self.output_root = Path(output_root)
        self.progress_callback = progress_callback
        self.logger = logging.getLogger(__name__)

    def run(self, experiment: ExperimentConfig, spec: SweepSpec) -> Optional[Dict[str, Any]]:
        """全セルを決定的な順序で実行し、最良セルを返す"""
        sweep_name = f"{experiment.name}_sweep"
        sweep_dir = self.output_root / sweep_name
        database = SweepDatabase(sweep_dir / "sweep.db")
        train_service = TrainService(sweep_dir, self.progress_callback)
        seeds = self._cell_seeds(experiment, spec.seeds_per_cell)

        cells = spec.cells()
        self.logger.info(f"スイープを開始します: {sweep_name}（{len(cells)} セル）")
        for index, (ti, tu) in enumerate(cells):
            cell_experiment = experiment.with_schedule(ti, tu).with_seeds(seeds)
            cell_dir = train_service.experiment_dir(cell_experiment)
            database.start_cell(sweep_name, index, ti, tu, cell_experiment.config_hash(), cell_dir.name)
            try:
                train_service.run(cell_experiment)
                summary = FileUtils.read_json(cell_dir / "summary.json")
                database.complete_cell(sweep_name, ti, tu, self._cell_result(summary))
                self.logger.info(f"セル {index + 1}/{len(cells)} が完了しました: T^I={ti}, T^U={tu}")
            except Exception as e:
                self.logger.error(f"セル実行エラー T^I={ti}, T^U={tu}: {e}")
                database.fail_cell(sweep_name, ti, tu, str(e))

        cells_data = [self._public_fields(c) for c in database.get_cells(sweep_name)]
        FileUtils.write_csv(sweep_dir / "sweep_summary.csv", cells_data, self._summary_fields())
        best_row = database.get_best_cell(sweep_name)
        best = self._public_fields(best_row) if best_row else None
        FileUtils.write_json(sweep_dir / "best_cell.json", {
            'base_config_hash': experiment.config_hash(),
            'best': best,
            'num_cells': len(cells),
            'failed_cells': sum(1 for c in cells_data if c['status'] == 'failed'),
        })
        if best:
            self.logger.info(f"最良セル: T^I={best['initial_phase']}, T^U={best['update_period']}")
        else:
            ErrorHandler.show_warning("完了したセルがありません")
        return best

    @staticmethod
    def _cell_seeds(experiment: ExperimentConfig, count: int) -> List[int]:
        """セルごとのシード（設定のシード列の先頭から、不足分は連番で補う）"""
        seeds = list(experiment.seeds[:count])
        next_seed = max(experiment.seeds) + 1
        while len(seeds) < count:
            seeds.append(next_seed)
            next_seed += 1
        return seeds

    @staticmethod
    def _cell_result(summary: Dict[str, Any]) -> Dict[str, Any]:
        final = summary['final']
        nan = {'mean': float('nan'), 'stderr': float('nan')}
        return {
            'num_seeds': summary['num_seeds'],
            'modes_frac_mean': final.get('modes_frac', nan)['mean'],
            'modes_frac_stderr': final.get('modes_frac', nan)['stderr'],
            'l1_mean': final.get('l1', nan)['mean'],
            'l1_stderr': final.get('l1', nan)['stderr'],
        }

    @staticmethod
    def _summary_fields() -> List[str]:
        return [
            'cell_index', 'initial_phase', 'update_period', 'status', 'num_seeds',
            'modes_frac_mean', 'modes_frac_stderr', 'l1_mean', 'l1_stderr',
            'config_hash', 'run_dir', 'error',
        ]

    @classmethod
    def _public_fields(cls, row: Dict[str, Any]) -> Dict[str, Any]:
        """出力用の列（行 ID・更新時刻は DB のみに保持）"""
        return {key: row[key] for key in cls._summary_fields()}


class OracleService:
    """厳密分布の出力サービス"""

    def __init__(self, output_root: Path):
        self.output_root = Path(output_root)
        self.logger = logging.getLogger(__name__)

    def run(self, experiment: ExperimentConfig) -> Path:
        """目標分布と（学習済みなら）各シードの終端分布を CSV で出力"""
        env = Hypergrid(experiment.env)
        experiment_dir = self.output_root / experiment.name
        oracle_dir = experiment_dir / "oracle"
        config_hash = experiment.config_hash()
        coord_fields = [f"x{d}" for d in range(env.dim)] + ['probability', 'config_hash']

        target = target_distribution(env)
        FileUtils.write_csv(oracle_dir / "target.csv", _with_hash(target.to_rows(), config_hash), coord_fields)

        report: Dict[str, Any] = {
            'config_hash': config_hash,
            'num_states': env.num_states,
            'log_z': float(np.log(env.all_rewards.sum())),
            'balanced_flow_violation': check_flow_balance(balanced_flows(env), env),
            'seeds': {},
        }

        for seed in experiment.seeds:
            manifest = latest_checkpoint(experiment_dir / f"seed_{seed}" / "checkpoints")
            if manifest is None:
                continue
            data = load_checkpoint(manifest, expected_hash=config_hash)
            sampler = sampler_distribution(data.online, env)
            FileUtils.write_csv(oracle_dir / f"sampler_seed_{seed}.csv", _with_hash(sampler.to_rows(), config_hash),
                               coord_fields)
            seed_report = {
                'step': data.step,
                'l1': float(np.abs(sampler.probs - target.probs).sum()),
            }
            try:
                enumeration = enumerate_trajectories(data.online, env)
                seed_report['enumeration_max_diff'] = float(np.abs(enumeration.terminal.probs - sampler.probs).max())
            except OracleSizeError:
                pass
            report['seeds'][str(seed)] = seed_report

        FileUtils.write_json(oracle_dir / "oracle_summary.json", report)
        self.logger.info(f"オラクル出力が完了しました: {oracle_dir}")
        return oracle_dir


class PlotDataService:
    """プロット用データ（モード発見率・L1 の2パネル）の出力サービス"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def run(self, run_paths: List[Path], out_dir: Path) -> Dict[str, Path]:
        """
        系列（アルゴリズム）ごとに平均 ± 標準誤差を出力

        Args:
            run_paths: 実験ディレクトリまたはシード実行ディレクトリ
            out_dir: 出力先
        Returns:
            パネル名 -> 出力パス
        """
        groups, series_hashes = self._group_runs(run_paths)
        required = list(PLOT_PANELS.values())
        tables = {
            label: [_read_metric_table(d / "metrics.csv", required) for d in dirs]
            for label, dirs in groups.items()
        }
        cadence = self._coarsest_cadence(tables)

        outputs: Dict[str, Path] = {}
        panel_rows: Dict[str, List[Dict[str, Any]]] = {}
        for panel, column in PLOT_PANELS.items():
            rows = []
            for label, runs in tables.items():
                steps = sorted(set.intersection(*(set(t) for t in runs)))
                if cadence is not None:
                    steps = [s for s in steps if s % cadence == 0]
                for step in steps:
                    mean, stderr = StatsUtils.mean_and_stderr([float(t[step][column]) for t in runs])
                    rows.append({
                        'series': label,
                        'step': step,
                        'trajectories': int(runs[0][step]['trajectories']),
                        'mean': repr(mean),
                        'stderr': repr(stderr),
                        'num_runs': len(runs),
                        'config_hash': series_hashes[label],
                    })
            panel_rows[panel] = rows
            path = Path(out_dir) / f"{panel}.csv"
            FileUtils.write_csv(path, rows, PANEL_FIELDS)
            outputs[panel] = path

        workbook_path = self._write_workbook(panel_rows, Path(out_dir) / "plot_data.xlsx")
        if workbook_path:
            outputs['workbook'] = workbook_path
        self.logger.info(f"プロット用データを出力しました: {out_dir}")
        return outputs

    def _group_runs(self, run_paths: List[Path]) -> Tuple[Dict[str, List[Path]], Dict[str, str]]:
        """系列名ごとのシード実行ディレクトリと設定ハッシュ（同一系列の設定ハッシュ混在は拒否）"""
        groups: Dict[str, List[Path]] = {}
        hashes: Dict[str, set] = {}
        for path in map(Path, run_paths):
            if (path / "metrics.csv").exists():
                dirs = [path]
                label_source = path.parent / "run.json"
            else:
                dirs = seed_run_dirs(path)
                label_source = path / "run.json"
            if not dirs:
                raise ValueError(f"メトリクスが見つかりません: {path}")
            label = FileUtils.read_json(label_source)['label'] if label_source.exists() else path.name
            groups.setdefault(label, []).extend(dirs)
            hashes.setdefault(label, set()).update(read_run_hash(d) for d in dirs)

        for label, values in hashes.items():
            if len(values) != 1:
                raise ConfigHashMismatchError(f"系列 {label} に異なる設定ハッシュが混在しています: {sorted(values)}")
        return groups, {label: next(iter(values)) for label, values in hashes.items()}

    def _coarsest_cadence(self, tables: Dict[str, List[Dict[int, Dict[str, str]]]]) -> Optional[int]:
        """記録間隔が揃っていなければ最も粗い間隔（警告付き）"""
        cadences = set()
        for runs in tables.values():
            for table in runs:
                steps = sorted(table)
                if len(steps) >= 2:
                    cadences.add(steps[1] - steps[0])
        if len(cadences) <= 1:
            return None
        coarsest = max(cadences)
        ErrorHandler.show_warning(f"記録間隔が一致しません {sorted(cadences)}: {coarsest} ステップ間隔に再標本化します")
        return coarsest

    def _write_workbook(self, panel_rows: Dict[str, List[Dict[str, Any]]], path: Path) -> Optional[Path]:
        """openpyxl が利用可能ならパネルごとのシートを持つブックを出力"""
        if not OPENPYXL_AVAILABLE:
            self.logger.warning("openpyxl が利用できないため xlsx 出力を省略します")
            return None
        workbook = openpyxl.Workbook()
        workbook.remove(workbook.active)
        for panel, rows in panel_rows.items():
            sheet = workbook.create_sheet(panel)
            sheet.append(PANEL_FIELDS)
            for row in rows:
                sheet.append([row['series'], row['step'], row['trajectories'],
                              float(row['mean']), float(row['stderr']), row['num_runs'], row['config_hash']])
        path.parent.mkdir(parents=True, exist_ok=True)
        workbook.save(str(path))
        return path
