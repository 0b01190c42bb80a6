"""Async run ledger: one row per CLI run plus an append-only event log."""

from __future__ import annotations

import json
from contextlib import asynccontextmanager
from datetime import datetime
from pathlib import Path
from typing import AsyncIterator, Optional

import aiosqlite
from platformdirs import user_data_dir

from .models import EventType, RunStatus


_APP_NAME = "stochastic-l2-gain"
_DB_FILENAME = "runs.db"

_RUN_COLUMNS = "run_id, command, status, created_at, config_hash, details"


def _get_db_path() -> Path:
    data_dir = Path(user_data_dir(_APP_NAME))
    data_dir.mkdir(parents=True, exist_ok=True)
    return data_dir / _DB_FILENAME


async def _ensure_schema(conn: aiosqlite.Connection) -> None:
    await conn.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            command TEXT,
            status TEXT,
            created_at TEXT,
            config_hash TEXT,
            details TEXT
        )
        """
    )
    await conn.execute(
        """
        CREATE TABLE IF NOT EXISTS events (
            id INTEGER PRIMARY KEY,
            run_id TEXT,
            event_type TEXT,
            timestamp TEXT,
            details TEXT
        )
        """
    )
    await conn.commit()


@asynccontextmanager
async def _connect() -> AsyncIterator[aiosqlite.Connection]:
    async with aiosqlite.connect(_get_db_path()) as conn:
        conn.row_factory = aiosqlite.Row
        await _ensure_schema(conn)
        yield conn


def _enum_value(value: RunStatus | EventType | str) -> str:
    if isinstance(value, (RunStatus, EventType)):
        return value.value
    return str(value)


def _normalize_timestamp(timestamp: datetime | str) -> str:
    if isinstance(timestamp, datetime):
        return timestamp.isoformat()
    return str(timestamp)


def _decode_details(row: aiosqlite.Row) -> dict:
    record = dict(row)
    raw = record.get("details")
    try:
        record["details"] = json.loads(raw) if raw else {}
    except json.JSONDecodeError:
        record["details"] = {}
    return record


async def save_run(
    run_id: str,
    command: str,
    status: RunStatus | str,
    created_at: datetime | str,
    config_hash: Optional[str],
    details: Optional[dict] = None,
) -> None:
    """Insert a run or update its status and details."""
    async with _connect() as conn:
        await conn.execute(
            f"""
            INSERT INTO runs ({_RUN_COLUMNS})
            VALUES (?, ?, ?, ?, ?, ?)
            ON CONFLICT(run_id) DO UPDATE SET
                status = excluded.status,
                config_hash = excluded.config_hash,
                details = excluded.details
            """,
            (
                run_id,
                command,
                _enum_value(status),
                _normalize_timestamp(created_at),
                config_hash,
                json.dumps(details or {}, ensure_ascii=True, sort_keys=True),
            ),
        )
        await conn.commit()


async def load_run(run_id: str) -> Optional[dict]:
    async with _connect() as conn:
        async with conn.execute(
            f"SELECT {_RUN_COLUMNS} FROM runs WHERE run_id = ?",
            (run_id,),
        ) as cursor:
            row = await cursor.fetchone()
            return None if row is None else _decode_details(row)


async def delete_run(run_id: str) -> bool:
    """Delete a run and its events."""
    async with _connect() as conn:
        cursor = await conn.execute("DELETE FROM runs WHERE run_id = ?", (run_id,))
        await conn.execute("DELETE FROM events WHERE run_id = ?", (run_id,))
        await conn.commit()
        return cursor.rowcount > 0


async def list_runs(command: Optional[str] = None) -> list[dict]:
    """All runs in creation order, optionally only those of one command."""
    query = f"SELECT {_RUN_COLUMNS} FROM runs"
    params: tuple = ()
    if command is not None:
        query += " WHERE command = ?"
        params = (command,)
    async with _connect() as conn:
        async with conn.execute(query + " ORDER BY created_at ASC", params) as cursor:
            return [_decode_details(row) for row in await cursor.fetchall()]


async def save_event(
    run_id: str,
    event_type: EventType | str,
    timestamp: datetime | str,
    details: Optional[dict] = None,
) -> None:
    async with _connect() as conn:
        await conn.execute(
            """
            INSERT INTO events (run_id, event_type, timestamp, details)
            VALUES (?, ?, ?, ?)
            """,
            (
                run_id,
                _enum_value(event_type),
                _normalize_timestamp(timestamp),
                json.dumps(details or {}, ensure_ascii=True, sort_keys=True),
            ),
        )
        await conn.commit()


async def load_events(run_id: str) -> list[dict]:
    """Events of one run in insertion order."""
    async with _connect() as conn:
        async with conn.execute(
            """
            SELECT id, run_id, event_type, timestamp, details
            FROM events
            WHERE run_id = ?
            ORDER BY id ASC
            """,
            (run_id,),
        ) as cursor:
            return [_decode_details(row) for row in await cursor.fetchall()]
