"""
ユーティリティのテスト
"""

import math

import numpy as np
import pytest

from DoubleGFN.utils import StatsUtils, TrainingAbort


class TestStatsUtils:

    def test_mean_and_stderr(self):
        mean, stderr = StatsUtils.mean_and_stderr([1.0, 2.0, 3.0, 4.0])
        assert mean == 2.5
        assert stderr == pytest.approx(math.sqrt(5.0 / 3.0 / 4.0))

    def test_single_value(self):
        assert StatsUtils.mean_and_stderr([0.3]) == (0.3, 0.0)

    def test_empty(self):
        mean, stderr = StatsUtils.mean_and_stderr([])
        assert math.isnan(mean) and math.isnan(stderr)

    def test_returns_python_floats(self):
        mean, stderr = StatsUtils.mean_and_stderr(np.array([1, 3]))
        assert type(mean) is float and type(stderr) is float


class TestTrainingAbort:

    def test_message_lists_residuals(self):
        error = TrainingAbort(7, "損失が有限ではありません", [0.5, float('nan')])
        assert error.step == 7
        assert "ステップ 7" in str(error)
        assert "[0.5, nan]" in str(error)

    def test_long_residual_list_is_shortened(self):
        error = TrainingAbort(1, "中断", np.arange(20.0))
        assert "残差 (20 本)" in str(error)
        assert str(error).endswith("7 …]")
        assert len(error.residuals) == 20

    def test_dump_marks_non_finite_values(self):
        dump = TrainingAbort(3, "中断", [1.0, float('inf'), float('nan')]).to_dict()
        assert dump == {'step': 3, 'reason': "中断", 'residuals': [1.0, 'inf', 'nan']}
