"""Newline-delimited JSON tuning logs.

Every record written during a run carries the schema version and the run
seed, so a log file is self-describing and can be replayed or analyzed
without the config that produced it.  Lines are serialized with sorted
keys and fixed separators: two runs with the same seed produce
byte-identical files.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from typing import IO, Iterator

from .ir import RewriteStep, history_from_json, history_to_json

SCHEMA_VERSION = 1


class LogError(Exception):
    """A log file that cannot be read: bad JSON, wrong schema, truncation."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LogWriter:
    """Stamps records with the schema version and run seed and writes NDJSON."""

    def __init__(self, stream: IO[str], seed: int):
        self.stream = stream
        self.seed = int(seed)
        self.count = 0

    def write(self, record: dict) -> None:
        payload = dict(record)
        payload["schema"] = SCHEMA_VERSION
        payload["seed"] = self.seed
        if isinstance(payload.get("history"), tuple):
            payload["history"] = history_to_json(payload["history"])
        cost = payload.get("cost")
        if isinstance(cost, float) and not math.isfinite(cost):
            payload["cost"] = None
        self.stream.write(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
        )
        self.count += 1


@contextmanager
def open_writer(path: str, seed: int) -> Iterator[LogWriter]:
    with open(path, "w", encoding="utf-8") as fh:
        yield LogWriter(fh, seed)


def iter_records(path: str) -> Iterator[dict]:
    """Yield records from a log file, failing loudly on damage.

    A line that is not valid JSON (including a final line cut off
    mid-write) raises LogError naming the 1-based line number.  A record
    whose schema version differs from SCHEMA_VERSION raises as well:
    silently reinterpreting an old log would corrupt a replay.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise LogError("truncated record (no trailing newline)", lineno)
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise LogError(f"corrupt record: {err.msg}", lineno) from err
            if not isinstance(record, dict):
                raise LogError("record is not an object", lineno)
            version = record.get("schema")
            if version != SCHEMA_VERSION:
                raise LogError(
                    f"schema version {version!r} is not supported "
                    f"(this reader handles {SCHEMA_VERSION})",
                    lineno,
                )
            yield record


def read_records(path: str) -> list[dict]:
    return list(iter_records(path))


def measurements(records: list[dict]) -> list[dict]:
    """The subset of records that carry one measured program each."""
    return [r for r in records if r.get("kind") == "measure"]


def record_history(record: dict) -> tuple[RewriteStep, ...]:
    return history_from_json(record["history"])
