"""
定数定義
"""

# アプリケーション情報
APP_NAME = "DoubleGFN"
APP_VERSION = "1.0.0"

# アルゴリズム・目的関数
ALGORITHMS = ["GFN", "DGFN"]
OBJECTIVES = ["tb", "subtb"]
MODE_CRITERIA = ["r2", "threshold"]

# 報酬定数（R0 を 1e-3 に下げた難化設定）
DEFAULT_R0 = 1e-3
DEFAULT_R1 = 0.5
DEFAULT_R2 = 2.0

# ネットワーク構成
DEFAULT_HIDDEN_DIM = 256
DEFAULT_NUM_LAYERS = 2
DEFAULT_LEAKY_SLOPE = 0.01
MASK_LOGIT = -1e9

# 学習設定
DEFAULT_BATCH_SIZE = 64
DEFAULT_TOTAL_STEPS = 10_000
DEFAULT_LR_POLICY = 1e-3
DEFAULT_LR_LOGZ = 1e-1
DEFAULT_ALPHA = 0.25
DEFAULT_SUBTB_LAMBDA = 0.9
DEFAULT_ADAM_BETA1 = 0.9
DEFAULT_ADAM_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8

# 目的関数ごとのターゲット更新スケジュール (T^I, T^U)
DEFAULT_SCHEDULES = {
    'tb': (698, 137),
    'subtb': (794, 149),
}

# 記録・保存の間隔
DEFAULT_METRIC_EVERY = 10
DEFAULT_CHECKPOINT_EVERY = 1000

# 評価設定
DEFAULT_WINDOW_SIZE = 200_000
DEFAULT_TOP_K = 100
DEFAULT_DIVERSE_THRESHOLD = 0.7
DEFAULT_ORACLE_MAX_STATES = 4096
DEFAULT_SEEDS = [0, 1, 2, 3, 4]

# オラクルのサイズ上限
MAX_ENUMERABLE_STATES = 10**7
MAX_ENUMERATION_DIM = 2
MAX_ENUMERATION_SIDE = 4

# 出力形式
METRIC_COLUMNS = ['step', 'trajectories', 'loss', 'l1', 'modes', 'modes_frac', 'mean_reward', 'logZ']
AGGREGATE_METRICS = ['loss', 'l1', 'modes', 'modes_frac', 'mean_reward', 'logZ']
PLOT_PANELS = {'modes': 'modes_frac', 'l1': 'l1'}
CONFIG_HASH_LENGTH = 16
CHECKPOINT_FORMAT = "dgfn-checkpoint-v1"
RESIDUALS_IN_MESSAGE = 8

# 終了コード
EXIT_SUCCESS = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

# 環境変数
OUTPUT_DIR_ENV = 'DGFN_OUTPUT_DIR'

# エンコーディング
ENCODING = 'utf-8'
