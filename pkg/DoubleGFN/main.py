"""
DoubleGFN メインエントリーポイント
サブコマンド: train / sweep / oracle / plot-data / presets
"""

import sys
import argparse
import logging
from pathlib import Path
from typing import List, Optional

from DoubleGFN.config import (
    ExperimentConfig, SweepSpec, list_presets, load_experiment, load_preset,
)
from DoubleGFN.constants import APP_NAME, APP_VERSION, EXIT_SUCCESS, ENCODING
from DoubleGFN.path_constants import get_logs_dir, resolve_output_root
from DoubleGFN.services import OracleService, PlotDataService, SweepService, TrainService
from DoubleGFN.utils import ConfigError, ErrorHandler


def setup_logging(output_root: Path):
    """ログシステムの初期化"""
    log_dir = get_logs_dir(output_root)
    log_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / 'dgfn.log', encoding=ENCODING),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )
    logging.info(f"{APP_NAME} {APP_VERSION} を開始します")


def parse_int_list(value: str, option: str) -> List[int]:
    """カンマ区切りの整数リスト"""
    try:
        values = [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise ConfigError([f"{option}: 整数のカンマ区切りで指定してください（{value}）"])
    if not values:
        raise ConfigError([f"{option}: 1つ以上の値が必要です"])
    return values


def build_parser() -> argparse.ArgumentParser:
    """コマンドライン引数の定義"""
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Double GFlowNet ハイパーグリッド実験")
    parser.add_argument('--version', action='version', version=f"{APP_NAME} {APP_VERSION}")
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add_config_options(sub: argparse.ArgumentParser):
        source = sub.add_mutually_exclusive_group(required=True)
        source.add_argument('--config', type=Path, help="TOML 設定ファイル")
        source.add_argument('--preset', help="同梱プリセット名")
        sub.add_argument('--output-dir', type=Path, help="出力ルート（環境変数が優先）")

    train = subparsers.add_parser('train', help="学習の実行")
    add_config_options(train)
    train.add_argument('--seeds', help="シードのカンマ区切り（例: 0,1,2,3,4）")
    train.add_argument('--resume', action='store_true', help="最新チェックポイントから再開")

    sweep = subparsers.add_parser('sweep', help="T^I × T^U のグリッド探索")
    add_config_options(sweep)
    sweep.add_argument('--ti', required=True, help="T^I 候補のカンマ区切り")
    sweep.add_argument('--tu', required=True, help="T^U 候補のカンマ区切り")
    sweep.add_argument('--seeds-per-cell', type=int, default=1, help="セルごとのシード数")

    oracle = subparsers.add_parser('oracle', help="厳密分布の出力")
    add_config_options(oracle)

    plot = subparsers.add_parser('plot-data', help="プロット用データの出力")
    plot.add_argument('runs', nargs='+', type=Path, help="実験またはシード実行ディレクトリ")
    plot.add_argument('--out', type=Path, required=True, help="出力先ディレクトリ")

    subparsers.add_parser('presets', help="同梱プリセットの一覧")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """設定ファイルまたはプリセットの読み込み"""
    experiment = load_experiment(args.config) if args.config else load_preset(args.preset)
    if getattr(args, 'seeds', None):
        experiment = experiment.with_seeds(parse_int_list(args.seeds, '--seeds'))
    return experiment


def run_command(args: argparse.Namespace) -> int:
    """サブコマンドの実行"""
    if args.command == 'presets':
        for name in list_presets():
            print(name)
        return EXIT_SUCCESS

    if args.command == 'plot-data':
        setup_logging(resolve_output_root(str(args.out)))
        PlotDataService().run(args.runs, args.out)
        return EXIT_SUCCESS

    experiment = load_config(args)
    config_root = str(args.output_dir) if args.output_dir else experiment.output_dir
    output_root = resolve_output_root(config_root)
    setup_logging(output_root)

    if args.command == 'train':
        experiment_dir = TrainService(output_root).run(experiment, resume=args.resume)
        logging.info(f"出力先: {experiment_dir}")
    elif args.command == 'sweep':
        spec = SweepSpec(
            initial_phases=tuple(parse_int_list(args.ti, '--ti')),
            update_periods=tuple(parse_int_list(args.tu, '--tu')),
            seeds_per_cell=args.seeds_per_cell,
        )
        SweepService(output_root).run(experiment, spec)
    elif args.command == 'oracle':
        OracleService(output_root).run(experiment)
    return EXIT_SUCCESS


def main(argv: Optional[List[str]] = None) -> int:
    """メイン実行関数（終了コード 0: 成功, 2: 設定エラー, 3: 実行時エラー）"""
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as e:
        return ErrorHandler.handle_config_error(e, "設定エラー")
    except KeyboardInterrupt:
        logging.info("ユーザーによって中断されました")
        return ErrorHandler.handle_runtime_error(RuntimeError("中断"), "実行中断")
    except Exception as e:
        return ErrorHandler.handle_runtime_error(e, "実行エラー")
    finally:
        logging.info(f"{APP_NAME} を終了します")


if __name__ == "__main__":
    sys.exit(main())
