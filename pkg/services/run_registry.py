"""
运行台账：把每次子命令的执行情况记到输出目录下的 `runs.db`（SQLite）。

职责定位：
1. 初始化台账表结构（runs / case_metrics / db_metadata）。
2. 封装通用读写，JSON 字段（config / artifacts）在这里统一序列化。
3. 给 `Api` 提供 start_run / finish_run / record_case_metrics 三个写入口。

台账只用于追溯，带时间戳，不参与产物的逐字节确定性。

排查建议：
- 台账里状态一直是 running：对应命令中途崩溃，看 error 字段与日志。
- 表不存在：看 `_init_database()`。
"""
import json
import logging
import sqlite3
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)


def generate_run_id(prefix: str = "run") -> str:
    return f"{prefix}_{uuid.uuid4().hex[:16]}"


class RunRegistry:
    """运行台账。

    调用链位置：`main.py` -> `Api` -> `RunRegistry`；`RefinementService` 不直接写台账。
    """

    VERSION = "1.0.0"
    JSON_FIELDS = ("config", "artifacts")

    def __init__(self, db_path: Path):
        self._db_path = Path(db_path)
        self._db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_database()

    @property
    def path(self) -> Path:
        return self._db_path

    def _get_connection(self) -> sqlite3.Connection:
        """每次调用新建连接，命令行进程内读写量很小。"""
        conn = sqlite3.connect(str(self._db_path))
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def _init_database(self):
        conn = self._get_connection()
        cursor = conn.cursor()
        try:
            # 1. 运行记录
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id TEXT PRIMARY KEY,
                    command TEXT NOT NULL,
                    seed INTEGER DEFAULT 0,
                    status TEXT DEFAULT 'running',
                    config TEXT DEFAULT '{}',
                    artifacts TEXT DEFAULT '{}',
                    error TEXT DEFAULT '',
                    started_at TEXT NOT NULL,
                    finished_at TEXT DEFAULT ''
                )
            """)
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command)")
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_started ON runs(started_at)")

            # 2. 病例级指标（eval 写入）
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS case_metrics (
                    run_id TEXT NOT NULL,
                    case_id TEXT NOT NULL,
                    split TEXT DEFAULT '',
                    stratum TEXT DEFAULT '',
                    init_cd REAL,
                    refined_cd REAL,
                    init_hd REAL,
                    refined_hd REAL,
                    PRIMARY KEY (run_id, case_id),
                    FOREIGN KEY(run_id) REFERENCES runs(id) ON DELETE CASCADE
                )
            """)

            # 3. 元信息
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS db_metadata (
                    key TEXT PRIMARY KEY,
                    value TEXT NOT NULL,
                    updated_at TEXT NOT NULL
                )
            """)
            cursor.execute("""
                INSERT OR REPLACE INTO db_metadata (key, value, updated_at)
                VALUES ('version', ?, ?)
            """, (self.VERSION, datetime.now().isoformat()))
            conn.commit()
            logger.debug(f"运行台账初始化成功: {self._db_path}")
        except Exception as e:
            conn.rollback()
            logger.error(f"运行台账初始化失败: {e}")
            raise
        finally:
            conn.close()

    # ========== 通用读写 ==========

    def execute_query(self, query: str, params: tuple = ()) -> List[Dict[str, Any]]:
        conn = self._get_connection()
        try:
            rows = conn.execute(query, params).fetchall()
            return [self._deserialize_json_fields(dict(row)) for row in rows]
        finally:
            conn.close()

    def execute_many(self, query: str, rows: Iterable[tuple]) -> int:
        conn = self._get_connection()
        cursor = conn.cursor()
        try:
            cursor.executemany(query, list(rows))
            conn.commit()
            return cursor.rowcount
        except Exception as e:
            conn.rollback()
            logger.error(f"台账写入失败: {e}")
            raise
        finally:
            conn.close()

    def _serialize_json_fields(self, data: Dict[str, Any]) -> Dict[str, Any]:
        return {k: json.dumps(v, ensure_ascii=False, sort_keys=True) if isinstance(v, (dict, list)) else v
                for k, v in data.items()}

    def _deserialize_json_fields(self, data: Dict[str, Any]) -> Dict[str, Any]:
        result = dict(data)
        for key in self.JSON_FIELDS:
            if isinstance(result.get(key), str):
                try:
                    result[key] = json.loads(result[key])
                except (json.JSONDecodeError, TypeError):
                    pass
        return result

    def _upsert_run(self, data: Dict[str, Any]):
        data = self._serialize_json_fields(data)
        columns = ", ".join(data)
        placeholders = ", ".join("?" for _ in data)
        updates = ", ".join(f"{k} = excluded.{k}" for k in data if k != "id")
        self.execute_many(
            f"INSERT INTO runs ({columns}) VALUES ({placeholders}) ON CONFLICT(id) DO UPDATE SET {updates}",
            [tuple(data.values())],
        )

    # ========== 运行记录 ==========

    def start_run(self, command: str, seed: int, config: Dict[str, Any]) -> str:
        run_id = generate_run_id()
        self._upsert_run({"id": run_id, "command": command, "seed": int(seed), "status": "running",
                          "config": config, "started_at": datetime.now().isoformat()})
        return run_id

    def finish_run(self, run_id: str, success: bool, artifacts: Optional[Dict[str, Any]] = None,
                   error: str = ""):
        self.execute_many(
            "UPDATE runs SET status = ?, artifacts = ?, error = ?, finished_at = ? WHERE id = ?",
            [("succeeded" if success else "failed",
              json.dumps(artifacts or {}, ensure_ascii=False, sort_keys=True, default=str),
              error, datetime.now().isoformat(), run_id)],
        )

    def record_case_metrics(self, run_id: str, rows: Iterable[Dict[str, Any]]) -> int:
        return self.execute_many(
            """
            INSERT OR REPLACE INTO case_metrics
                (run_id, case_id, split, stratum, init_cd, refined_cd, init_hd, refined_hd)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
            [(run_id, r["case_id"], r.get("split", ""), r.get("stratum", ""), r["init_cd"], r["refined_cd"],
              r["init_hd"], r["refined_hd"]) for r in rows],
        )

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        rows = self.execute_query("SELECT * FROM runs WHERE id = ?", (run_id,))
        return rows[0] if rows else None

    def list_runs(self, command: str = "", limit: int = 50) -> List[Dict[str, Any]]:
        if command:
            return self.execute_query(
                "SELECT * FROM runs WHERE command = ? ORDER BY started_at DESC LIMIT ?", (command, limit))
        return self.execute_query("SELECT * FROM runs ORDER BY started_at DESC LIMIT ?", (limit,))

    def case_metrics(self, run_id: str) -> List[Dict[str, Any]]:
        return self.execute_query("SELECT * FROM case_metrics WHERE run_id = ? ORDER BY case_id", (run_id,))

    def get_version(self) -> str:
        rows = self.execute_query("SELECT value FROM db_metadata WHERE key = 'version'")
        return rows[0]["value"] if rows else ""
