# dlsense/db.py
import os
import sqlite3
import json
import time
import traceback
from typing import List, Dict, Any

DB_PATH = os.path.join('out', 'runs.db')

# Tunables
DEFAULT_TIMEOUT = 30.0          # sqlite3 connect timeout (seconds)
MAX_WRITE_RETRIES = 6           # number of times to retry on "database is locked"
RETRY_BASE_DELAY = 0.05         # base delay (seconds) for exponential backoff
FALLBACK_LOG = 'registry_fallback.log'


def configure(path: str):
    """Point the run registry at another sqlite file (normally <out>/runs.db)."""
    global DB_PATH
    DB_PATH = str(path)


def _ensure_db_dir():
    os.makedirs(os.path.dirname(os.path.abspath(DB_PATH)), exist_ok=True)


def get_conn():
    """
    New sqlite3.Connection per operation, WAL journal so a reader does not
    block the training writer.
    """
    _ensure_db_dir()
    conn = sqlite3.connect(DB_PATH, timeout=DEFAULT_TIMEOUT, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    try:
        conn.execute("PRAGMA journal_mode=WAL;")
        conn.execute("PRAGMA synchronous=NORMAL;")
        conn.execute("PRAGMA foreign_keys = ON;")
    except sqlite3.DatabaseError:
        pass
    return conn


def _execute_write(sql: str, params: tuple = ()):
    """Single INSERT/UPDATE with exponential backoff on 'database is locked'."""
    attempt = 0
    while True:
        try:
            conn = get_conn()
            try:
                with conn:
                    conn.execute(sql, params)
                return
            finally:
                conn.close()
        except sqlite3.OperationalError as e:
            if 'locked' in str(e).lower() and attempt < MAX_WRITE_RETRIES:
                time.sleep(RETRY_BASE_DELAY * (2 ** attempt))
                attempt += 1
                continue
            raise


def _execute_fetchall(sql: str, params: tuple = ()) -> List[sqlite3.Row]:
    conn = get_conn()
    try:
        return conn.execute(sql, params).fetchall()
    finally:
        conn.close()


# --- Schema initialization ---
def init_db():
    tables = [
        '''
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            command TEXT,
            config_hash TEXT,
            seed INTEGER,
            config_json TEXT,
            status TEXT,
            started_at REAL,
            finished_at REAL
        )
        ''',
        '''
        CREATE TABLE IF NOT EXISTS epochs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT,
            stage TEXT,
            epoch INTEGER,
            val_loss REAL,
            val_acc REAL,
            pf REAL,
            metrics_json TEXT,
            created_at REAL
        )
        ''',
        '''
        CREATE TABLE IF NOT EXISTS artifacts (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT,
            path TEXT,
            sha256 TEXT,
            created_at REAL
        )
        ''',
        '''
        CREATE TABLE IF NOT EXISTS tracebacks (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            context TEXT,
            traceback_text TEXT,
            created_at REAL
        )
        ''',
    ]
    for sql in tables:
        _execute_write(sql, ())


# --- Convenience wrappers ---

def start_run(run_id: str, command: str, config_hash: str, seed: int, config: dict):
    _execute_write(
        'INSERT OR REPLACE INTO runs (run_id, command, config_hash, seed, config_json, status, started_at) '
        'VALUES (?, ?, ?, ?, ?, ?, ?)',
        (run_id, command, config_hash, int(seed), json.dumps(config, sort_keys=True), 'running', time.time())
    )


def finish_run(run_id: str, status: str):
    _execute_write(
        'UPDATE runs SET status = ?, finished_at = ? WHERE run_id = ?',
        (status, time.time(), run_id)
    )


def log_epoch(run_id: str, metrics: dict):
    _execute_write(
        'INSERT INTO epochs (run_id, stage, epoch, val_loss, val_acc, pf, metrics_json, created_at) '
        'VALUES (?, ?, ?, ?, ?, ?, ?, ?)',
        (run_id, metrics.get('stage'), metrics.get('epoch'), metrics.get('val_loss'),
         metrics.get('val_acc'), metrics.get('pf'), json.dumps(metrics, sort_keys=True), time.time())
    )


def add_artifact(run_id: str, path: str, sha256: str):
    _execute_write(
        'INSERT INTO artifacts (run_id, path, sha256, created_at) VALUES (?, ?, ?, ?)',
        (run_id, path, sha256, time.time())
    )


def fallback_path() -> str:
    return os.path.join(os.path.dirname(os.path.abspath(DB_PATH)), FALLBACK_LOG)


def add_traceback(context: str, exc: Exception = None):
    """
    Keep the failure of a CLI stage in the run registry. When the registry
    itself cannot be written, one JSON line goes to registry_fallback.log
    beside it and the original error still propagates from the caller.
    """
    tb_text = 'no-exception'
    if exc is not None:
        tb_text = ''.join(traceback.format_exception(type(exc), exc, exc.__traceback__))
    try:
        _execute_write(
            'INSERT INTO tracebacks (context, traceback_text, created_at) VALUES (?, ?, ?)',
            (context, tb_text, time.time())
        )
    except Exception as e:
        record = {'context': context, 'registry': os.path.abspath(DB_PATH), 'registry_error': str(e),
                  'traceback': tb_text, 'created_at': time.time()}
        try:
            with open(fallback_path(), 'a', encoding='utf-8') as fh:
                fh.write(json.dumps(record, sort_keys=True) + '\n')
        except OSError:
            pass


def fetch_tracebacks(limit: int = 50, context: str = None) -> List[Dict[str, Any]]:
    """Newest first; ``context`` narrows to one stage, e.g. 'train_detectnet'."""
    sql = 'SELECT id, context, traceback_text, created_at FROM tracebacks'
    params: tuple = ()
    if context:
        sql += ' WHERE context = ?'
        params = (context,)
    rows = _execute_fetchall(sql + ' ORDER BY id DESC LIMIT ?', params + (limit,))
    return [{'id': r['id'], 'context': r['context'], 'traceback': r['traceback_text'],
             'created_at': r['created_at']} for r in rows]


def fetch_runs() -> List[Dict[str, Any]]:
    rows = _execute_fetchall('SELECT * FROM runs ORDER BY started_at ASC')
    return [dict(r) for r in rows]


def fetch_epochs(run_id: str) -> List[Dict[str, Any]]:
    rows = _execute_fetchall(
        'SELECT metrics_json FROM epochs WHERE run_id = ? ORDER BY id ASC',
        (run_id,)
    )
    return [json.loads(r['metrics_json']) for r in rows]


def fetch_table(name: str):
    if name not in ('runs', 'epochs', 'artifacts', 'tracebacks'):
        raise ValueError(f'unknown table {name!r}')
    rows = _execute_fetchall(f"SELECT * FROM {name}")
    return [dict(r) for r in rows]
