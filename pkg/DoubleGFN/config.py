"""
実験設定管理
TOML ファイル・プリセットの読み込みと検証
"""

import json
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace, asdict
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

from DoubleGFN.constants import (
    DEFAULT_R0, DEFAULT_R1, DEFAULT_R2, DEFAULT_HIDDEN_DIM, DEFAULT_NUM_LAYERS,
    DEFAULT_LEAKY_SLOPE, DEFAULT_BATCH_SIZE, DEFAULT_TOTAL_STEPS, DEFAULT_LR_POLICY,
    DEFAULT_LR_LOGZ, DEFAULT_ALPHA, DEFAULT_SUBTB_LAMBDA, DEFAULT_ADAM_BETA1,
    DEFAULT_ADAM_BETA2, DEFAULT_ADAM_EPS, DEFAULT_SCHEDULES, DEFAULT_METRIC_EVERY,
    DEFAULT_CHECKPOINT_EVERY, DEFAULT_WINDOW_SIZE, DEFAULT_TOP_K,
    DEFAULT_DIVERSE_THRESHOLD, DEFAULT_ORACLE_MAX_STATES, DEFAULT_SEEDS,
    CONFIG_HASH_LENGTH, ENCODING,
)
from DoubleGFN.path_constants import PathKeys, get_default_path
from DoubleGFN.utils import ConfigError, Validator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvConfig:
    """ハイパーグリッド環境の設定"""
    dim: int = 2
    side: int = 8
    r0: float = DEFAULT_R0
    r1: float = DEFAULT_R1
    r2: float = DEFAULT_R2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'EnvConfig':
        return _build(cls, data, 'env')


@dataclass(frozen=True)
class TrainerConfig:
    """学習スケジュールの設定"""
    algorithm: str = "DGFN"
    objective: str = "tb"
    initial_phase: int = DEFAULT_SCHEDULES['tb'][0]
    update_period: int = DEFAULT_SCHEDULES['tb'][1]
    alpha: float = DEFAULT_ALPHA
    initial_phase_full_copy: bool = False
    batch_size: int = DEFAULT_BATCH_SIZE
    total_steps: int = DEFAULT_TOTAL_STEPS
    lr_policy: float = DEFAULT_LR_POLICY
    lr_logz: float = DEFAULT_LR_LOGZ
    subtb_lambda: float = DEFAULT_SUBTB_LAMBDA
    uniform_pb: bool = False
    exploration_epsilon: float = 0.0
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    num_layers: int = DEFAULT_NUM_LAYERS
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    adam_beta1: float = DEFAULT_ADAM_BETA1
    adam_beta2: float = DEFAULT_ADAM_BETA2
    adam_eps: float = DEFAULT_ADAM_EPS
    seed: int = 0
    metric_every: int = DEFAULT_METRIC_EVERY
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY

    @property
    def uses_target(self) -> bool:
        return self.algorithm == "DGFN"

    @property
    def label(self) -> str:
        """系列名（例: DGFN-TB）"""
        return f"{self.algorithm}-{self.objective.upper()}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainerConfig':
        data = dict(data)
        # スケジュール未指定時は目的関数ごとの既定値
        objective = data.get('objective', cls.objective)
        schedule = DEFAULT_SCHEDULES.get(objective, DEFAULT_SCHEDULES['tb'])
        data.setdefault('initial_phase', schedule[0])
        data.setdefault('update_period', schedule[1])
        return _build(cls, data, 'trainer')


@dataclass(frozen=True)
class MetricConfig:
    """評価指標の設定"""
    window_size: int = DEFAULT_WINDOW_SIZE
    mode_criterion: str = "r2"
    mode_threshold: Optional[float] = None
    top_k: int = DEFAULT_TOP_K
    diverse_threshold: float = DEFAULT_DIVERSE_THRESHOLD
    oracle_max_states: int = DEFAULT_ORACLE_MAX_STATES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricConfig':
        return _build(cls, data, 'metrics')


@dataclass(frozen=True)
class ExperimentConfig:
    """実験全体の設定"""
    name: str = "experiment"
    output_dir: str = ""
    seeds: Tuple[int, ...] = tuple(DEFAULT_SEEDS)
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def to_dict(self) -> dict:
        """辞書型に変換"""
        return {
            'name': self.name,
            'output_dir': self.output_dir,
            'seeds': list(self.seeds),
            'env': self.env.to_dict(),
            'trainer': self.trainer.to_dict(),
            'metrics': self.metrics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        """辞書型から作成（検証込み）"""
        errors = []
        known = {'name', 'output_dir', 'seeds', 'env', 'trainer', 'metrics'}
        for key in data:
            if key not in known:
                errors.append(f"{key}: 未知の設定項目です")

        sections = {}
        for key, builder in (('env', EnvConfig), ('trainer', TrainerConfig), ('metrics', MetricConfig)):
            try:
                sections[key] = builder.from_dict(data.get(key, {}))
            except ConfigError as e:
                errors.extend(e.errors)

        seeds = data.get('seeds', DEFAULT_SEEDS)
        if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) for s in seeds):
            errors.append("seeds: 整数のリストで指定してください")
            seeds = []
        if errors:
            raise ConfigError(errors)

        experiment = cls(
            name=str(data.get('name', 'experiment')),
            output_dir=str(data.get('output_dir', '')),
            seeds=tuple(seeds),
            **sections,
        )
        experiment.validate()
        return experiment

    def validate(self):
        """検証（失敗時は ConfigError）"""
        is_valid, errors = Validator.validate_experiment(self)
        if not is_valid:
            raise ConfigError(errors)

    def config_hash(self) -> str:
        """シード・出力先を除いた設定内容のハッシュ"""
        payload = self.to_dict()
        payload.pop('seeds')
        payload.pop('output_dir')
        payload['trainer'].pop('seed')
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode(ENCODING)).hexdigest()[:CONFIG_HASH_LENGTH]

    def with_seeds(self, seeds: List[int]) -> 'ExperimentConfig':
        """シードの上書き"""
        updated = replace(self, seeds=tuple(seeds))
        updated.validate()
        return updated

    def trainer_for_seed(self, seed: int) -> TrainerConfig:
        """シードを設定した学習設定"""
        return replace(self.trainer, seed=int(seed))

    def with_schedule(self, initial_phase: int, update_period: int) -> 'ExperimentConfig':
        """ターゲット更新スケジュールの上書き"""
        trainer = replace(self.trainer, initial_phase=int(initial_phase), update_period=int(update_period))
        updated = replace(self, name=f"{self.name}_ti{initial_phase}_tu{update_period}", trainer=trainer)
        updated.validate()
        return updated


@dataclass(frozen=True)
class SweepSpec:
    """T^I × T^U のグリッド探索設定"""
    initial_phases: Tuple[int, ...]
    update_periods: Tuple[int, ...]
    seeds_per_cell: int = 1

    def __post_init__(self):
        errors = []
        if not self.initial_phases:
            errors.append("sweep.ti: 1つ以上の値が必要です")
        if not self.update_periods:
            errors.append("sweep.tu: 1つ以上の値が必要です")
        if any(ti < 0 for ti in self.initial_phases):
            errors.append("sweep.ti: 0以上の値を指定してください")
        if any(tu < 1 for tu in self.update_periods):
            errors.append("sweep.tu: 1以上の値を指定してください")
        if self.seeds_per_cell < 1:
            errors.append("sweep.seeds_per_cell: 1以上が必要です")
        if errors:
            raise ConfigError(errors)

    def cells(self) -> List[Tuple[int, int]]:
        """決定的な走査順（T^I 優先）"""
        return [(ti, tu) for ti in self.initial_phases for tu in self.update_periods]


def _build(cls, data: dict, section: str):
    """セクション辞書からデータクラスを作成（型変換・未知キー検出）"""
    if not isinstance(data, dict):
        raise ConfigError([f"{section}: テーブルで指定してください"])

    errors = []
    names = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in names:
            errors.append(f"{section}.{key}: 未知の設定項目です")

    kwargs = {}
    for name, f in names.items():
        if name not in data:
            continue
        value = data[name]
        try:
            kwargs[name] = _coerce(value, f.default)
        except (TypeError, ValueError):
            errors.append(f"{section}.{name}: 値の型が不正です（{value!r}）")

    if errors:
        raise ConfigError(errors)
    return cls(**kwargs)


def _coerce(value, default):
    """既定値の型に合わせた変換"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(value)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(value)
        return value
    if isinstance(default, float) or default is None:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(value)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(value)
        return value
    return value


def load_experiment(config_path: Path) -> ExperimentConfig:
    """TOML 設定ファイルの読み込み"""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError([f"config: ファイルが存在しません: {config_path}"])
    try:
        with open(config_path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"config: TOML の解析に失敗しました: {e}"])

    experiment = ExperimentConfig.from_dict(data)
    logger.info(f"設定を読み込み: {config_path} (hash={experiment.config_hash()})")
    return experiment


def list_presets() -> List[str]:
    """同梱プリセット名の一覧"""
    presets_dir = Path(get_default_path(PathKeys.PRESETS_DIR))
    return sorted(p.stem for p in presets_dir.glob('*.toml'))


def load_preset(name: str) -> ExperimentConfig:
    """プリセットの読み込み"""
    preset_path = Path(get_default_path(PathKeys.PRESETS_DIR)) / f"{name}.toml"
    if not preset_path.exists():
        raise ConfigError([f"preset: 未知のプリセットです: {name}（{', '.join(list_presets())}）"])
    return load_experiment(preset_path)


def save_experiment_json(experiment: ExperimentConfig) -> Dict[str, Any]:
    """run.json 用の設定表現"""
    return {
        'config': experiment.to_dict(),
        'config_hash': experiment.config_hash(),
        'label': experiment.trainer.label,
        'seeds': list(experiment.seeds),
    }
