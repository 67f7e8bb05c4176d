"""
スイープ結果データベース
"""

import sqlite3
import logging
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Dict, Any, Optional, List, Iterator


class SweepDatabase:
    """T^I × T^U スイープのセル結果を管理するクラス"""

    def __init__(self, db_path: Path):
        self.db_path = Path(db_path)
        self.logger = logging.getLogger(__name__)
        self.setup_database()

    @contextmanager
    def _get_connection(self) -> Iterator[sqlite3.Connection]:
        """データベース接続の取得（ブロック終了時にコミットして閉じる）"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        try:
            with conn:
                yield conn
        finally:
            conn.close()

    def setup_database(self):
        """データベースの初期設定"""
        try:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)

            with self._get_connection() as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS cells (
                        cell_id INTEGER PRIMARY KEY AUTOINCREMENT,
                        sweep_name TEXT NOT NULL,
                        cell_index INTEGER NOT NULL,
                        initial_phase INTEGER NOT NULL,
                        update_period INTEGER NOT NULL,
                        config_hash TEXT NOT NULL,
                        status TEXT NOT NULL CHECK(status IN ('running', 'completed', 'failed')),
                        num_seeds INTEGER NOT NULL DEFAULT 0,
                        modes_frac_mean REAL,
                        modes_frac_stderr REAL,
                        l1_mean REAL,
                        l1_stderr REAL,
                        error TEXT,
                        run_dir TEXT,
                        updated_at TEXT NOT NULL,
                        UNIQUE(sweep_name, initial_phase, update_period)
                    )
                ''')
                conn.commit()
                self.logger.info("データベースの初期設定が完了しました")

        except Exception as e:
            self.logger.error(f"データベース設定エラー: {e}")
            raise

    def start_cell(self, sweep_name: str, cell_index: int, initial_phase: int, update_period: int,
                   config_hash: str, run_dir: str):
        """セルの実行開始（既存結果は上書き）"""
        current_time = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        try:
            with self._get_connection() as conn:
                conn.execute('''
                    INSERT OR REPLACE INTO cells (
                        sweep_name, cell_index, initial_phase, update_period, config_hash,
                        status, run_dir, updated_at
                    ) VALUES (?, ?, ?, ?, ?, 'running', ?, ?)
                ''', (sweep_name, cell_index, initial_phase, update_period, config_hash, run_dir, current_time))
                conn.commit()
        except Exception as e:
            self.logger.error(f"セル登録エラー: {e}")
            raise

    def complete_cell(self, sweep_name: str, initial_phase: int, update_period: int, result: Dict[str, Any]):
        """セルの集計結果を記録"""
        current_time = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        try:
            with self._get_connection() as conn:
                conn.execute('''
                    UPDATE cells SET
                        status = 'completed', num_seeds = ?,
                        modes_frac_mean = ?, modes_frac_stderr = ?,
                        l1_mean = ?, l1_stderr = ?, error = NULL, updated_at = ?
                    WHERE sweep_name = ? AND initial_phase = ? AND update_period = ?
                ''', (
                    result['num_seeds'],
                    result['modes_frac_mean'],
                    result['modes_frac_stderr'],
                    result['l1_mean'],
                    result['l1_stderr'],
                    current_time,
                    sweep_name, initial_phase, update_period,
                ))
                conn.commit()
        except Exception as e:
            self.logger.error(f"セル結果記録エラー: {e}")
            raise

    def fail_cell(self, sweep_name: str, initial_phase: int, update_period: int, error: str):
        """セルの失敗を記録"""
        current_time = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        with self._get_connection() as conn:
            conn.execute('''
                UPDATE cells SET status = 'failed', error = ?, updated_at = ?
                WHERE sweep_name = ? AND initial_phase = ? AND update_period = ?
            ''', (error, current_time, sweep_name, initial_phase, update_period))
            conn.commit()

    def get_cells(self, sweep_name: str) -> List[Dict[str, Any]]:
        """スイープの全セル（走査順）"""
        try:
            with self._get_connection() as conn:
                cursor = conn.cursor()
                cursor.execute('SELECT * FROM cells WHERE sweep_name = ? ORDER BY cell_index', (sweep_name,))
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            self.logger.error(f"セル取得エラー: {e}")
            return []

    def get_best_cell(self, sweep_name: str) -> Optional[Dict[str, Any]]:
        """最終モード割合が最大のセル（同点は L1 が小さい方、さらに走査順）"""
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                SELECT * FROM cells
                WHERE sweep_name = ? AND status = 'completed'
                ORDER BY modes_frac_mean DESC, l1_mean ASC, cell_index ASC
                LIMIT 1
            ''', (sweep_name,))
            row = cursor.fetchone()
            return dict(row) if row else None
