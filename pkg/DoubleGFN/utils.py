"""
統合ユーティリティ
"""

import csv
import json
import logging
import traceback
from pathlib import Path
from typing import List, Dict, Any, Tuple, Iterable, Sequence

import numpy as np

from DoubleGFN.constants import (
    ALGORITHMS, OBJECTIVES, MODE_CRITERIA, ENCODING,
    EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, RESIDUALS_IN_MESSAGE,
)


# === 例外定義 ===

class ConfigError(ValueError):
    """設定エラー（項目単位のメッセージを保持）"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("設定エラー:\n" + "\n".join(f"  - {e}" for e in self.errors))


class StateOutOfBoundsError(ValueError):
    """グリッド範囲外の状態"""


class IllegalActionError(ValueError):
    """現在の状態で実行できないアクション"""


class EmptyModeSetError(ValueError):
    """モード集合が空（正規化の不整合）"""


class OracleSizeError(ValueError):
    """厳密計算のサイズ上限超過"""


class MissingColumnError(ValueError):
    """メトリクスファイルに必要な列がない"""


class ConfigHashMismatchError(ValueError):
    """異なる設定ハッシュの実行を集計しようとした"""


class NonFiniteError(RuntimeError):
    """NaN / Inf の検出"""


class UnsupportedPrimitiveError(RuntimeError):
    """テープに未対応の演算が含まれる"""


class TrainingAbort(RuntimeError):
    """学習の中断（ステップ番号と残差を保持）"""

    def __init__(self, step: int, message: str, residuals: Sequence[float] = ()):
        self.step = step
        self.reason = message
        self.residuals = [float(r) for r in residuals]
        detail = ""
        if self.residuals:
            shown = ", ".join(f"{r:.6g}" for r in self.residuals[:RESIDUALS_IN_MESSAGE])
            more = " …" if len(self.residuals) > RESIDUALS_IN_MESSAGE else ""
            detail = f"\n  残差 ({len(self.residuals)} 本): [{shown}{more}]"
        super().__init__(f"ステップ {step} で学習を中断: {message}{detail}")

    def to_dict(self) -> Dict[str, Any]:
        """残差ダンプ用の辞書（非有限値は文字列表記）"""
        return {
            'step': self.step,
            'reason': self.reason,
            'residuals': [r if np.isfinite(r) else repr(r) for r in self.residuals],
        }


class RunIOError(RuntimeError):
    """実行中の入出力エラー"""

    def __init__(self, step: int, error: Exception):
        self.step = step
        super().__init__(f"ステップ {step} で入出力エラー: {error}")


class ErrorHandler:
    """エラーハンドリング"""

    @staticmethod
    def handle_config_error(error: ConfigError, context: str = "") -> int:
        """設定エラーの処理"""
        error_msg = f"{context}: {error}" if context else str(error)
        logging.error(error_msg)
        return EXIT_CONFIG_ERROR

    @staticmethod
    def handle_runtime_error(error: Exception, context: str = "") -> int:
        """実行時エラーの処理"""
        error_msg = f"{context}: {error}" if context else str(error)
        logging.error(f"{error_msg}\n{traceback.format_exc()}")
        return EXIT_RUNTIME_ERROR

    @staticmethod
    def show_warning(message: str):
        """警告表示"""
        logging.warning(message)


class Validator:
    """入力検証"""

    @staticmethod
    def validate_env(env) -> List[str]:
        """環境設定の検証"""
        errors = []
        if env.dim < 1:
            errors.append(f"env.dim: 1以上が必要です（{env.dim}）")
        if env.side < 2:
            errors.append(f"env.side: 2以上が必要です（{env.side}）")
        if not (0 < env.r0 < env.r1 < env.r2):
            errors.append(f"env.r0/r1/r2: 0 < r0 < r1 < r2 を満たしません（{env.r0}, {env.r1}, {env.r2}）")
        return errors

    @staticmethod
    def validate_trainer(trainer) -> List[str]:
        """学習設定の検証"""
        errors = []
        if trainer.algorithm not in ALGORITHMS:
            errors.append(f"trainer.algorithm: {ALGORITHMS} のいずれかを指定してください（{trainer.algorithm}）")
        if trainer.objective not in OBJECTIVES:
            errors.append(f"trainer.objective: {OBJECTIVES} のいずれかを指定してください（{trainer.objective}）")
        if trainer.initial_phase < 0:
            errors.append("trainer.initial_phase: 0以上が必要です")
        if trainer.update_period < 1:
            errors.append("trainer.update_period: 1以上が必要です")
        if not (0.0 < trainer.alpha <= 1.0):
            errors.append(f"trainer.alpha: (0, 1] の範囲で指定してください（{trainer.alpha}）")
        if trainer.batch_size < 1:
            errors.append("trainer.batch_size: 1以上が必要です")
        if trainer.total_steps < 1:
            errors.append("trainer.total_steps: 1以上が必要です")
        if trainer.lr_policy <= 0 or trainer.lr_logz <= 0:
            errors.append("trainer.lr_policy/lr_logz: 正の値が必要です")
        if not (0.0 < trainer.subtb_lambda <= 1.0):
            errors.append(f"trainer.subtb_lambda: (0, 1] の範囲で指定してください（{trainer.subtb_lambda}）")
        if not (0.0 <= trainer.exploration_epsilon < 1.0):
            errors.append("trainer.exploration_epsilon: [0, 1) の範囲で指定してください")
        if trainer.hidden_dim < 1 or trainer.num_layers < 1:
            errors.append("trainer.hidden_dim/num_layers: 1以上が必要です")
        if trainer.metric_every < 1 or trainer.checkpoint_every < 1:
            errors.append("trainer.metric_every/checkpoint_every: 1以上が必要です")
        return errors

    @staticmethod
    def validate_metrics(metrics) -> List[str]:
        """評価設定の検証"""
        errors = []
        if metrics.window_size < 1:
            errors.append("metrics.window_size: 1以上が必要です")
        if metrics.mode_criterion not in MODE_CRITERIA:
            errors.append(f"metrics.mode_criterion: {MODE_CRITERIA} のいずれかを指定してください")
        if metrics.mode_criterion == 'threshold' and metrics.mode_threshold is None:
            errors.append("metrics.mode_threshold: threshold 基準では必須です")
        if metrics.top_k < 1:
            errors.append("metrics.top_k: 1以上が必要です")
        if not (0.0 <= metrics.diverse_threshold <= 1.0):
            errors.append("metrics.diverse_threshold: [0, 1] の範囲で指定してください")
        return errors

    @staticmethod
    def validate_experiment(experiment) -> Tuple[bool, List[str]]:
        """実験設定の総合検証"""
        errors = []
        errors.extend(Validator.validate_env(experiment.env))
        errors.extend(Validator.validate_trainer(experiment.trainer))
        errors.extend(Validator.validate_metrics(experiment.metrics))
        if not errors and experiment.metrics.mode_criterion == 'r2':
            from DoubleGFN.environment import mode_coordinates
            if not mode_coordinates(experiment.env.side):
                errors.append(f"env.side: R2 領域に入る座標がなくモード集合が空になります（H={experiment.env.side}）")
        if not experiment.seeds:
            errors.append("seeds: 1つ以上のシードが必要です")
        elif len(set(experiment.seeds)) != len(experiment.seeds):
            errors.append("seeds: シードが重複しています")
        if not experiment.name.strip():
            errors.append("name: 実験名は必須です")
        return len(errors) == 0, errors


class FileUtils:
    """ファイル操作ユーティリティ"""

    @staticmethod
    def read_csv(file_path: Path) -> List[Dict[str, str]]:
        """CSV読み込み"""
        with open(Path(file_path), 'r', newline='', encoding=ENCODING) as f:
            return list(csv.DictReader(f))

    @staticmethod
    def read_csv_header(file_path: Path) -> List[str]:
        """CSVヘッダーの読み込み"""
        with open(Path(file_path), 'r', newline='', encoding=ENCODING) as f:
            return next(csv.reader(f), [])

    @staticmethod
    def write_csv(file_path: Path, data: List[Dict[str, Any]], fieldnames: List[str] = None):
        """CSV書き込み"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)

        if not data and not fieldnames:
            return

        with open(file_path, 'w', newline='', encoding=ENCODING) as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames or list(data[0].keys()), lineterminator='\n')
            writer.writeheader()
            writer.writerows(data)

    @staticmethod
    def append_csv_rows(file_path: Path, rows: Iterable[Dict[str, Any]], fieldnames: List[str]):
        """CSVへの追記（ファイルがなければヘッダー付きで作成）"""
        file_path = Path(file_path)
        is_new = not file_path.exists()
        with open(file_path, 'a', newline='', encoding=ENCODING) as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator='\n')
            if is_new:
                writer.writeheader()
            writer.writerows(rows)

    @staticmethod
    def append_jsonl(file_path: Path, records: Iterable[Dict[str, Any]]):
        """JSON-lines への追記"""
        with open(Path(file_path), 'a', encoding=ENCODING) as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def truncate_after_step(file_path: Path, step: int, jsonl: bool = False):
        """指定ステップより後の記録を削除（再開用）"""
        file_path = Path(file_path)
        if not file_path.exists():
            return
        with open(file_path, 'r', encoding=ENCODING) as f:
            lines = f.readlines()
        kept = []
        for i, line in enumerate(lines):
            if not jsonl and i == 0:
                kept.append(line)
                continue
            record_step = json.loads(line)['step'] if jsonl else int(line.split(',', 1)[0])
            if record_step <= step:
                kept.append(line)
        with open(file_path, 'w', encoding=ENCODING) as f:
            f.writelines(kept)

    @staticmethod
    def write_json(file_path: Path, data: Dict[str, Any]):
        """JSON書き込み（キー順固定）"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding=ENCODING) as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def read_json(file_path: Path) -> Dict[str, Any]:
        """JSON読み込み"""
        with open(Path(file_path), 'r', encoding=ENCODING) as f:
            return json.load(f)


class StatsUtils:
    """シード間集計ユーティリティ"""

    @staticmethod
    def mean_and_stderr(values: Sequence[float]) -> Tuple[float, float]:
        """平均と標準誤差（n=1 のとき標準誤差 0）"""
        array = np.asarray(values, dtype=np.float64)
        n = array.size
        if n == 0:
            return float('nan'), float('nan')
        mean = float(np.mean(array))
        if n == 1:
            return mean, 0.0
        return mean, float(np.std(array, ddof=1) / np.sqrt(n))
