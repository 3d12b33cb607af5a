#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
執行紀錄模組 - 使用 SQLite 持久化儲存

功能：
1. 每次執行（run）的設定、狀態與最終指標
2. 每步紀錄（t、M1、是否 remap、Nf）
3. 每次 remap 的細節（Nf 前後、M2、動作）
4. 觸發條件檢查（M1 ≤ E1 / M1 > E1）
"""

import json
import logging
import sqlite3
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from threading import Lock
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

LEDGER_FILE = "ledger.db"

# 每累積多少筆步驟紀錄寫入一次
STEP_FLUSH_SIZE = 512


class RunLedger:
    """
    SQLite 執行紀錄
    步驟紀錄先暫存在記憶體，批次寫入
    """

    def __init__(self, db_path: Path):
        self.db_path = Path(db_path)
        self.lock = Lock()
        self._pending_steps: List[tuple] = []

        # 確保目錄存在
        self.db_path.parent.mkdir(parents=True, exist_ok=True)

        self._init_database()

    @contextmanager
    def get_connection(self):
        """取得資料庫連接（Context Manager）"""
        conn = sqlite3.connect(str(self.db_path), check_same_thread=False, timeout=30)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
            conn.commit()
        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()

    def _init_database(self):
        """初始化資料表"""
        with self.lock:
            with self.get_connection() as conn:
                cursor = conn.cursor()

                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS runs (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        scenario TEXT NOT NULL,
                        method TEXT NOT NULL,
                        config TEXT,
                        status TEXT DEFAULT 'running',
                        started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        finished_at TIMESTAMP,
                        metrics TEXT,
                        error TEXT
                    )
                ''')

                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS steps (
                        run_id INTEGER NOT NULL,
                        step INTEGER NOT NULL,
                        t REAL NOT NULL,
                        m1 REAL,
                        remapped BOOLEAN DEFAULT 0,
                        nf INTEGER,
                        PRIMARY KEY (run_id, step),
                        FOREIGN KEY (run_id) REFERENCES runs(id)
                    )
                ''')

                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS remaps (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        run_id INTEGER NOT NULL,
                        step INTEGER NOT NULL,
                        t REAL NOT NULL,
                        m1 REAL,
                        nf_before INTEGER,
                        nf_after INTEGER,
                        m2_temp REAL,
                        m2_candidate REAL,
                        action TEXT,
                        FOREIGN KEY (run_id) REFERENCES runs(id)
                    )
                ''')

                cursor.execute('CREATE INDEX IF NOT EXISTS idx_remaps_run ON remaps(run_id)')

        logger.debug(f"執行紀錄資料庫就緒: {self.db_path}")

    # ============================================
    # 執行
    # ============================================

    def start_run(self, scenario: str, method: str, config: Optional[Dict[str, Any]] = None) -> int:
        with self.lock:
            with self.get_connection() as conn:
                cursor = conn.cursor()
                cursor.execute(
                    'INSERT INTO runs (scenario, method, config) VALUES (?, ?, ?)',
                    (scenario, method, json.dumps(config, default=str) if config else None),
                )
                run_id = cursor.lastrowid
        logger.info(f"開始執行 #{run_id}: {scenario} ({method})")
        return run_id

    def finish_run(
        self,
        run_id: int,
        status: str = "finished",
        metrics: Optional[Dict[str, Any]] = None,
        error: Optional[str] = None,
    ):
        self.flush()
        with self.lock:
            with self.get_connection() as conn:
                conn.execute(
                    'UPDATE runs SET status = ?, finished_at = ?, metrics = ?, error = ? WHERE id = ?',
                    (
                        status,
                        datetime.now().isoformat(),
                        json.dumps(metrics, default=str) if metrics else None,
                        error,
                        run_id,
                    ),
                )

    def get_runs(self) -> List[Dict]:
        with self.get_connection() as conn:
            rows = conn.execute('SELECT * FROM runs ORDER BY id').fetchall()
        runs = []
        for row in rows:
            run = dict(row)
            for key in ('config', 'metrics'):
                if run.get(key):
                    run[key] = json.loads(run[key])
            runs.append(run)
        return runs

    # ============================================
    # 步驟與 remap
    # ============================================

    def record_step(self, run_id: int, step: int, t: float, m1: float, remapped: bool, nf: int):
        with self.lock:
            self._pending_steps.append((run_id, step, t, m1, int(remapped), nf))
            full = len(self._pending_steps) >= STEP_FLUSH_SIZE
        if full:
            self.flush()

    def record_remap(
        self,
        run_id: int,
        step: int,
        t: float,
        m1: float,
        nf_before: int,
        nf_after: int,
        m2_temp: Optional[float],
        m2_candidate: Optional[float],
        action: str,
    ):
        with self.lock:
            with self.get_connection() as conn:
                conn.execute('''
                    INSERT INTO remaps
                    (run_id, step, t, m1, nf_before, nf_after, m2_temp, m2_candidate, action)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                ''', (run_id, step, t, m1, nf_before, nf_after, m2_temp, m2_candidate, action))

    def flush(self):
        """寫入暫存的步驟紀錄"""
        with self.lock:
            pending, self._pending_steps = self._pending_steps, []
            if not pending:
                return
            with self.get_connection() as conn:
                conn.executemany(
                    'INSERT OR REPLACE INTO steps (run_id, step, t, m1, remapped, nf) VALUES (?, ?, ?, ?, ?, ?)',
                    pending,
                )

    def get_steps(self, run_id: int) -> List[Dict]:
        self.flush()
        with self.get_connection() as conn:
            rows = conn.execute(
                'SELECT * FROM steps WHERE run_id = ? ORDER BY step', (run_id,)
            ).fetchall()
        return [dict(row) for row in rows]

    def get_remaps(self, run_id: int) -> List[Dict]:
        with self.get_connection() as conn:
            rows = conn.execute(
                'SELECT * FROM remaps WHERE run_id = ? ORDER BY step', (run_id,)
            ).fetchall()
        return [dict(row) for row in rows]

    def trigger_violations(self, run_id: int, e1: float) -> int:
        """
        檢查 remap 觸發條件

        非 remap 步必須 M1 ≤ E1，remap 步必須 M1 > E1；回傳違反筆數
        """
        self.flush()
        with self.get_connection() as conn:
            row = conn.execute('''
                SELECT COUNT(*) AS count FROM steps
                WHERE run_id = ? AND ((remapped = 0 AND m1 > ?) OR (remapped = 1 AND m1 <= ?))
            ''', (run_id, e1, e1)).fetchone()
        return row['count']


# 全域實例
_ledgers: Dict[str, RunLedger] = {}
_ledger_lock = Lock()


def get_ledger(directory: Path) -> RunLedger:
    """取得輸出目錄對應的執行紀錄單例"""
    db_path = Path(directory) / LEDGER_FILE
    key = str(db_path.resolve())
    with _ledger_lock:
        if key not in _ledgers:
            _ledgers[key] = RunLedger(db_path)
        return _ledgers[key]
