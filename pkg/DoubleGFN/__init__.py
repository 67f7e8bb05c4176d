"""
DoubleGFN Package
ハイパーグリッド上の Double GFlowNet 学習フレームワーク
"""

# バージョン情報
__version__ = '1.0.0'


# メインコンポーネントの遅延インポート
def get_trainer():
    """DGFNTrainer の遅延インポート"""
    from DoubleGFN.trainer import DGFNTrainer
    return DGFNTrainer


def get_train_service():
    """TrainService の遅延インポート"""
    from DoubleGFN.services import TrainService
    return TrainService


def main(argv=None):
    """メイン実行関数の遅延インポート"""
    from DoubleGFN.main import main as main_func
    return main_func(argv)


# 公開API
__all__ = [
    'get_trainer',
    'get_train_service',
    'main'
]
