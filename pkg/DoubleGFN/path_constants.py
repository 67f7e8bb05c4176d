"""
パス関連の定数定義
"""

import os
from pathlib import Path
from typing import Dict, Optional

from DoubleGFN.constants import OUTPUT_DIR_ENV


class PathKeys:
    """パス定数定義クラス"""

    USER_DATA_DIR = "USER_DATA_DIR"
    OUTPUT_ROOT = "OUTPUT_ROOT"
    PRESETS_DIR = "PRESETS_DIR"


DEFAULT_PATHS: Dict[str, str] = {
    PathKeys.USER_DATA_DIR: str(Path.home() / "Documents" / "DoubleGFN"),
    PathKeys.OUTPUT_ROOT: str(Path.home() / "Documents" / "DoubleGFN" / "runs"),
    PathKeys.PRESETS_DIR: str(Path(__file__).parent / "presets"),
}


def get_default_path(key: str) -> str:
    """デフォルトパスを取得"""
    return DEFAULT_PATHS.get(key, "")


def resolve_output_root(config_output_dir: Optional[str] = None) -> Path:
    """出力ルートの決定（環境変数 > 設定ファイル > デフォルト）"""
    env_value = os.environ.get(OUTPUT_DIR_ENV, "").strip()
    if env_value:
        return Path(env_value)
    if config_output_dir:
        return Path(config_output_dir)
    return Path(get_default_path(PathKeys.OUTPUT_ROOT))


def get_logs_dir(output_root: Path) -> Path:
    """ログディレクトリを取得"""
    return Path(output_root) / "logs"
